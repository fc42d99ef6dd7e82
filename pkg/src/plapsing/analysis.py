"""Checks of the growth, gradient blow-up and continuity conclusions on solver output."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .curve import Trajectory
from .params import BarrierParams
from .solver import Field, PDirichlet, barrier_values, sample


class DegenerateWindow(ValueError):
    pass


MIN_WINDOW_NODES = 8


def _window(f: Field, r_window):
    lo, hi = r_window
    r = f.grid.r
    m = (r >= lo) & (r <= hi)
    if m.sum() < MIN_WINDOW_NODES:
        raise DegenerateWindow(f"only {int(m.sum())} nodes in r-window [{lo}, {hi}]")
    return r, m


def ring_average(f: Field) -> np.ndarray:
    v = f.values
    return v.mean(axis=1) if f.grid.n_theta else v


def _loglog_fit(x, y):
    lx, ly = np.log(x), np.log(y)
    A = np.stack([lx, np.ones_like(lx)], axis=1)
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    resid = ly - A @ coef
    return float(coef[0]), float(coef[1]), float(np.sqrt(np.mean(resid ** 2)))


@dataclass
class PowerFit:
    slope: float
    log_prefactor: float
    residual: float  # RMS misfit in log(value)
    n_nodes: int
    r_window: tuple[float, float]

    def to_dict(self) -> dict:
        return {"slope": self.slope, "log_prefactor": self.log_prefactor,
                "residual": self.residual, "n_nodes": self.n_nodes,
                "r_window": list(self.r_window)}


def fit_growth_exponent(f: Field, r_window) -> PowerFit:
    """Least-squares slope of log v against log r (ring-averaged on polar grids)."""
    r, m = _window(f, r_window)
    v = ring_average(f)[m]
    if np.any(v <= 0):
        raise DegenerateWindow("field must be positive on the fit window")
    s, c, res = _loglog_fit(r[m], v)
    return PowerFit(s, c, res, int(m.sum()), tuple(map(float, r_window)))


def gradient_magnitude(f: Field) -> np.ndarray:
    """|grad v| at the nodes by centered differences (one-sided at the radial ends)."""
    g = f.grid
    v = f.values
    r = g.r
    gr = np.gradient(v, r, axis=0, edge_order=2)
    if not g.n_theta:
        return np.abs(gr)
    dth = 2 * np.pi / g.n_theta
    gt = (np.roll(v, -1, axis=1) - np.roll(v, 1, axis=1)) / (2 * dth) / r[:, None]
    return np.sqrt(gr * gr + gt * gt)


@dataclass
class BlowupResult:
    slope: float
    residual: float
    monotone: bool
    bin_radii: list[float]
    bin_means: list[float]

    def to_dict(self) -> dict:
        return {"slope": self.slope, "residual": self.residual, "monotone": self.monotone,
                "bin_radii": self.bin_radii, "bin_means": self.bin_means}


def gradient_blowup_check(f: Field, r_window, n_bins: int = 8) -> BlowupResult:
    """Slope of log|grad v| against log r and whether |grad v| grows toward the centre.

    The monotonicity flag looks at ring-averaged |grad v| averaged again over
    ``n_bins`` logarithmic bins spanning the window.
    """
    r, m = _window(f, r_window)
    gm = gradient_magnitude(f)
    ring = gm.mean(axis=1) if f.grid.n_theta else gm
    if np.any(ring[m] <= 0):
        raise DegenerateWindow("gradient vanishes on the window")
    slope, _, res = _loglog_fit(r[m], ring[m])
    edges = np.geomspace(r[m].min(), r[m].max() * (1 + 1e-12), n_bins + 1)
    idx = np.digitize(r[m], edges) - 1
    means, centres = [], []
    for b in range(n_bins):
        sel = idx == b
        if sel.any():
            means.append(float(ring[m][sel].mean()))
            centres.append(float(np.sqrt(edges[b] * edges[b + 1])))
    monotone = bool(np.all(np.diff(means) < 0))
    return BlowupResult(slope, res, monotone, centres, means)


@dataclass
class Reconstruction:
    """u(x, t) = v(x - xi(t), t) on probe points; NaN where x - xi(t) leaves the annulus."""

    points: np.ndarray  # (..., 2) probe coordinates in the original frame
    values: np.ndarray
    xi: np.ndarray
    time: float

    def argmin(self) -> np.ndarray:
        k = np.nanargmin(self.values)
        return self.points.reshape(-1, self.points.shape[-1])[k]

    def hole_centre(self) -> np.ndarray:
        """Centroid of the absent probe points inside the region of present ones."""
        absent = np.isnan(self.values)
        pts = self.points[absent]
        # keep the hole around the singularity, drop the far field outside the annulus
        near = np.linalg.norm(pts - self.xi[:2], axis=-1) < 0.5 * np.ptp(self.points[..., 0])
        return pts[near].mean(axis=0) if near.any() else self.xi[:2]


def probe_grid(center, half_width: float, n: int) -> np.ndarray:
    x = np.linspace(center[0] - half_width, center[0] + half_width, n)
    y = np.linspace(center[1] - half_width, center[1] + half_width, n)
    X, Y = np.meshgrid(x, y, indexing="ij")
    return np.stack([X, Y], axis=-1)


def reconstruct_u(f: Field, traj: Trajectory, points=None, half_width: float = 1.0,
                  n: int = 81) -> Reconstruction:
    """Back to original coordinates; probes live in the (x1, x2) plane through xi(t).

    Without explicit ``points`` a square probe grid centred at xi(0) is used,
    so that successive snapshots share the same probes.
    """
    xi = np.asarray(traj.position(f.time), dtype=float)
    if points is None:
        points = probe_grid(np.asarray(traj.position(0.0))[:2], half_width, n)
    pts = np.asarray(points, dtype=float)
    d = pts - xi[:2]
    r = np.hypot(d[..., 0], d[..., 1])
    th = np.arctan2(d[..., 1], d[..., 0])
    vals = sample(f, r, th if f.grid.n_theta else None)
    return Reconstruction(pts, vals, xi, f.time)


@dataclass
class ContinuityResult:
    times: list[float]
    deviations: list[float]
    tol: float
    passed: bool
    decreasing_towards_zero: bool
    probe_radii: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"times": self.times, "deviations": self.deviations, "tol": self.tol,
                "passed": self.passed, "decreasing_towards_zero": self.decreasing_towards_zero,
                "probe_radii": self.probe_radii}


def initial_continuity_check(run: list[Field], v0, probe_radii=(0.5, 1.0, 2.0),
                             tol: float = 1e-12) -> ContinuityResult:
    """max over probes of |v(y, t) - v0(y)| for each snapshot.

    Probes are the grid nodes nearest to ``probe_radii`` (every angle on polar
    grids), so no interpolation error enters.  Passes iff the first snapshot
    deviates by at most ``tol`` relative to max |v0| on the probes; the flag
    records whether deviations shrink as t decreases.
    """
    g = run[0].grid
    j = np.unique([int(np.argmin(np.abs(np.log(g.r / rp)))) for rp in probe_radii])
    pr = g.r[j]
    ref = np.asarray(v0(pr), dtype=float)
    scale = float(np.max(np.abs(ref))) or 1.0
    times, devs = [], []
    for f in run:
        vals = f.values[j]
        d = vals - ref[:, None] if g.n_theta else vals - ref
        times.append(float(f.time))
        devs.append(float(np.max(np.abs(d))))
    order = np.argsort(times)
    d_sorted = np.asarray(devs)[order]
    decreasing = bool(np.all(np.diff(d_sorted) >= -1e-14 * scale))
    return ContinuityResult(times, devs, tol * scale, devs[int(order[0])] <= tol * scale,
                            decreasing, pr.tolist())


def energy(f: Field, p: float | None = None) -> float:
    """Discrete integral of |grad v|^p over the annulus (same quadrature as the solver)."""
    p = f.p if p is None else p
    if p is None:
        raise ValueError("field carries no exponent p; pass it explicitly")
    return p * _operator(f.grid, f.n, p).energy(f.values, 0.0)


@lru_cache(maxsize=16)
def _operator(grid, n, p):
    return PDirichlet(grid, n, p)


def energy_series(run: list[Field], p: float | None = None) -> list[tuple[float, float]]:
    return [(f.time, energy(f, p)) for f in run]


@dataclass
class SandwichResult:
    mode: str
    violation: float  # max of (v- - v_i^-) or (v_i^+ - v+), positive means violated
    scale: float      # max v+ on the nodes over the run
    rel_tol: float

    @property
    def tol(self) -> float:
        return self.rel_tol * self.scale

    @property
    def passed(self) -> bool:
        return self.violation <= self.tol

    def to_dict(self) -> dict:
        return {"mode": self.mode, "violation": self.violation, "scale": self.scale,
                "tol": self.tol, "passed": self.passed}


def sandwich_check(run: list[Field], params: BarrierParams, rel_tol: float = 1e-2) -> SandwichResult:
    """Compare every snapshot of one run with its own barrier."""
    mode = run[0].mode
    if mode not in ("sub", "super"):
        raise ValueError("run snapshots carry no sub/super mode tag")
    viol, scale = -np.inf, 0.0
    for f in run:
        r = f.grid.radii()
        bar = barrier_values(params, mode, r, f.time)
        d = bar - f.values if mode == "sub" else f.values - bar
        viol = max(viol, float(d.max()))
        scale = max(scale, float(barrier_values(params, "super", r, f.time).max()))
    return SandwichResult(mode, viol, scale, rel_tol)


@dataclass
class TrackingResult:
    times: list[float]
    xi: list[list[float]]
    hole_offsets: list[float]    # |hole centre - xi(t)|
    argmin_offsets: list[float]  # | |argmin - xi(t)| - r_in |, distance of the minimiser from the hole rim
    cell: float                  # probe spacing
    cells: float = 2.0

    @property
    def passed(self) -> bool:
        lim = self.cells * self.cell
        return max(self.hole_offsets) <= lim and max(self.argmin_offsets) <= lim

    def to_dict(self) -> dict:
        return {"times": self.times, "xi": self.xi, "hole_offsets": self.hole_offsets,
                "argmin_offsets": self.argmin_offsets, "cell": self.cell,
                "limit": self.cells * self.cell, "passed": self.passed}


def track_singularity(run: list[Field], traj: Trajectory, half_width: float = 1.0,
                      n: int = 81, cells: float = 2.0) -> TrackingResult:
    """Locate the singularity of u in each snapshot and compare with xi(t).

    The annulus excludes a disc of radius r_in around xi(t), so u is absent
    there and its minimum sits on the rim.  Two offsets are reported: the
    centroid of the absent probe disc against xi(t), and the distance of the
    minimiser from the rim.
    """
    pts = probe_grid(np.asarray(traj.position(0.0))[:2], half_width, n)
    cell = 2.0 * half_width / (n - 1)
    times, xis, holes, rims = [], [], [], []
    for f in run:
        rec = reconstruct_u(f, traj, pts)
        xi = rec.xi[:2]
        times.append(float(f.time))
        xis.append(xi.tolist())
        holes.append(float(np.linalg.norm(rec.hole_centre() - xi)))
        rims.append(float(abs(np.linalg.norm(rec.argmin() - xi) - f.grid.r_in)))
    return TrackingResult(times, xis, holes, rims, cell, cells)


def inner_decade(f: Field) -> tuple[float, float]:
    return (f.grid.r_in, min(10.0 * f.grid.r_in, f.grid.r_out))


def analyze_run(run: list[Field], params: BarrierParams, traj: Trajectory | None = None,
                r_window=None, rel_tol: float = 1e-2) -> dict:
    """RunReport entries for one approximant run (snapshots in time order)."""
    last = run[-1]
    w = tuple(r_window) if r_window is not None else inner_decade(last)
    cfg = params.cfg
    fit = fit_growth_exponent(last, w)
    blow = gradient_blowup_check(last, w)
    band = (cfg.lam - 0.05, cfg.lam_prime + 0.05)
    blow_max = (cfg.lam_prime - 1.0) / 2.0
    out = {
        "mode": last.mode,
        "index": last.grid.index,
        "grid": last.grid.describe(),
        "T": last.time,
        "clamped": last.clamped,
        "sandwich": {"anchor": "barrier sandwich v- <= v_i^- and v_i^+ <= v+",
                     **sandwich_check(run, params, rel_tol).to_dict()},
        "growth": {"anchor": "growth bounds |x - xi|^lambda' <~ u <~ |x - xi|^lambda",
                   **fit.to_dict(), "band": list(band),
                   "passed": band[0] <= fit.slope <= band[1]},
        "gradient_blowup": {"anchor": "|grad u| -> infinity at xi(t)", **blow.to_dict(),
                            "slope_max": blow_max,
                            "passed": blow.slope <= blow_max and blow.monotone},
        "energy": {"anchor": "p-Dirichlet energy along the flow",
                   "series": [[t, e] for t, e in energy_series(run, cfg.p)]},
    }
    if traj is not None and last.grid.n_theta:
        # t = 0 holds the blended initial datum, not a solution snapshot
        later = [f for f in run if f.time > 0] or run
        out["tracking"] = {"anchor": "singularity located at xi(t)",
                           **track_singularity(later, traj).to_dict()}
    return out
