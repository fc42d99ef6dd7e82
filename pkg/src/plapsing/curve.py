"""Singularity trajectories xi(t) and the speed bound |xi'(t)| <= C_xi/(1+At)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.interpolate import PchipInterpolator


@dataclass(frozen=True)
class Trajectory:
    """A C^1 curve in R^n.

    ``position`` and ``velocity`` map a scalar or array of times to points of
    shape ``t.shape + (n,)``.  They must be pure: the solver calls them from
    anywhere.
    """

    position: Callable
    velocity: Callable
    dim: int
    name: str
    parameters: dict = field(default_factory=dict)

    def describe(self) -> dict:
        return {"name": self.name, "dim": self.dim, **self.parameters}


def _unit(direction, dim):
    e = np.zeros(dim)
    d = np.asarray(direction if direction is not None else [1.0], dtype=float)
    e[: d.size] = d
    norm = np.linalg.norm(e)
    if norm == 0:
        raise ValueError("direction must be nonzero")
    return e / norm


def _origin(xi0, dim):
    x = np.zeros(dim)
    if xi0 is not None:
        x0 = np.asarray(xi0, dtype=float)
        x[: x0.size] = x0
    return x


def stationary(dim: int = 2, xi0=None) -> Trajectory:
    x0 = _origin(xi0, dim)

    def pos(t):
        t = np.asarray(t, dtype=float)
        return np.broadcast_to(x0, t.shape + (dim,)).copy()

    def vel(t):
        t = np.asarray(t, dtype=float)
        return np.zeros(t.shape + (dim,))

    return Trajectory(pos, vel, dim, "stationary", {"xi0": x0.tolist()})


def log_drift(c: float, A: float, dim: int = 2, xi0=None, direction=None) -> Trajectory:
    """xi(t) = xi0 + (c/A) log(1+At) e, whose speed is exactly c/(1+At)."""
    x0 = _origin(xi0, dim)
    e = _unit(direction, dim)

    def pos(t):
        t = np.asarray(t, dtype=float)
        return x0 + (c / A * np.log1p(A * t))[..., None] * e

    def vel(t):
        t = np.asarray(t, dtype=float)
        return (c / (1.0 + A * t))[..., None] * e

    return Trajectory(pos, vel, dim, "log_drift",
                      {"c": c, "A": A, "xi0": x0.tolist(), "direction": e.tolist()})


def spiral(c: float, A: float, omega: float = 1.0, dim: int = 2, xi0=None) -> Trajectory:
    """Decaying spiral xi0 + L(t) (cos phi, sin phi, 0, ...).

    L(t) = (c'/A) log(1+At) and phi(t) = omega log(1 + log(1+At)), with
    c' = c / sqrt(1+omega^2).  Then |xi'| = c'/(1+At) sqrt(1 + omega^2 q^2)
    where q = log(1+At)/(1+log(1+At)) < 1, so the speed stays below c/(1+At).
    """
    if dim < 2:
        raise ValueError("spiral needs dim >= 2")
    x0 = _origin(xi0, dim)
    ce = c / np.sqrt(1.0 + omega ** 2)

    def parts(t):
        t = np.asarray(t, dtype=float)
        lg = np.log1p(A * t)
        L = ce / A * lg
        dL = ce / (1.0 + A * t)
        phi = omega * np.log1p(lg)
        dphi = omega * A / ((1.0 + A * t) * (1.0 + lg))
        return t, L, dL, phi, dphi

    def pos(t):
        t, L, _, phi, _ = parts(t)
        out = np.broadcast_to(x0, t.shape + (dim,)).copy()
        out[..., 0] += L * np.cos(phi)
        out[..., 1] += L * np.sin(phi)
        return out

    def vel(t):
        t, L, dL, phi, dphi = parts(t)
        out = np.zeros(t.shape + (dim,))
        out[..., 0] = dL * np.cos(phi) - L * dphi * np.sin(phi)
        out[..., 1] = dL * np.sin(phi) + L * dphi * np.cos(phi)
        return out

    return Trajectory(pos, vel, dim, "spiral",
                      {"c": c, "A": A, "omega": omega, "xi0": x0.tolist()})


def linear(w, xi0=None) -> Trajectory:
    """Constant velocity w; never admissible over long horizons."""
    w = np.asarray(w, dtype=float)
    dim = w.size
    x0 = _origin(xi0, dim)

    def pos(t):
        t = np.asarray(t, dtype=float)
        return x0 + t[..., None] * w

    def vel(t):
        t = np.asarray(t, dtype=float)
        return np.broadcast_to(w, t.shape + (dim,)).copy()

    return Trajectory(pos, vel, dim, "linear", {"w": w.tolist(), "xi0": x0.tolist()})


def polyline(times, points) -> Trajectory:
    """Curve through tabulated positions, C^1 via monotone cubic (PCHIP) interpolation.

    Times outside the table are clamped to its range for the position; the
    velocity is zero there, so supply a table that covers the run horizon.
    """
    times = np.asarray(times, dtype=float)
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if times.size < 2 or np.any(np.diff(times) <= 0):
        raise ValueError("polyline times must be strictly increasing, at least 2 entries")
    interp = PchipInterpolator(times, pts, axis=0, extrapolate=False)
    deriv = interp.derivative()
    lo, hi = times[0], times[-1]
    dim = pts.shape[1]

    def pos(t):
        t = np.clip(np.asarray(t, dtype=float), lo, hi)
        return interp(t)

    def vel(t):
        t = np.asarray(t, dtype=float)
        inside = (t >= lo) & (t <= hi)
        v = deriv(np.clip(t, lo, hi))
        return np.where(inside[..., None], v, 0.0)

    return Trajectory(pos, vel, dim, "polyline",
                      {"times": times.tolist(), "points": pts.tolist()})


def sample_times(horizon: float, samples: int) -> np.ndarray:
    """0 followed by geometric points up to ``horizon``."""
    if samples < 2:
        raise ValueError("samples >= 2 required")
    return np.concatenate([[0.0], np.geomspace(horizon * 1e-6, horizon, samples - 1)])


def admissible(traj: Trajectory, c_xi: float, A: float, horizon: float,
               samples: int = 10_000) -> tuple[bool, float]:
    """Sampled check of |xi'(t)| (1+At) / C_xi <= 1; returns (ok, worst ratio)."""
    if horizon <= 0:
        raise ValueError("horizon > 0 required")
    t = sample_times(horizon, samples)
    speed = np.linalg.norm(traj.velocity(t), axis=-1)
    ratio = speed * (1.0 + A * t) / c_xi
    worst = float(ratio.max())
    return worst <= 1.0, worst


def from_config(table: dict, dim: int, A: float, c_xi: float) -> Trajectory:
    """Build a curve from a config table such as ``{"name": "log_drift", "c_fraction": 0.5}``.

    ``c`` may be given absolutely or as ``c_fraction`` of C_xi.
    """
    opts = dict(table)
    name = opts.pop("name", "stationary")
    if "c_fraction" in opts:
        opts["c"] = opts.pop("c_fraction") * c_xi
    xi0 = opts.pop("xi0", None)
    if name == "stationary":
        return stationary(dim, xi0)
    if name == "log_drift":
        return log_drift(opts.pop("c"), A, dim, xi0, opts.pop("direction", None))
    if name == "spiral":
        return spiral(opts.pop("c"), A, opts.pop("omega", 1.0), dim, xi0)
    if name == "linear":
        return linear(opts.pop("w"), xi0)
    if name == "polyline":
        return polyline(opts.pop("times"), opts.pop("points"))
    raise ValueError(f"unknown curve {name!r}")
