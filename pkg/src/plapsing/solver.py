"""Moving-frame p-Laplace flow on annuli and the nested-domain approximation.

The equation v_t = Delta_p v + xi'(t) . grad v is solved on
Omega_i = {1/(i+1) < |y| < i+1} with Dirichlet data taken from a barrier.
Space is discretized through a convex discrete p-Dirichlet energy

    E(w) = sum_cells vol_c * (|grad w|_c^2 + eps^2)^{p/2} / p

on a log-spaced radial grid (radial mode, any n) or a polar grid (n = 2).
A proximal (minimizing-movement) step minimizes
E(w) + sum_nodes mass * (w - w_prev)^2 / (2 dt) by damped Newton; the
drift is split off and applied explicitly with first-order upwinding.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.linalg import LinAlgError, solveh_banded
from scipy.sparse.linalg import spsolve

from . import barriers as br
from .curve import Trajectory
from .params import BarrierParams


class StabilityError(RuntimeError):
    pass


class NonconvergenceError(RuntimeError):
    pass


class OrderingViolation(ValueError):
    pass


class NegativeField(RuntimeError):
    pass


def sphere_area(n: int) -> float:
    """Surface measure of the unit sphere in R^n."""
    return 2.0 * math.pi ** (n / 2) / math.gamma(n / 2)


@dataclass(frozen=True)
class AnnulusGrid:
    r_in: float
    r_out: float
    n_r: int
    n_theta: int = 0
    index: int | None = None

    def __post_init__(self):
        if not 0 < self.r_in < self.r_out:
            raise ValueError(f"need 0 < r_in < r_out (got {self.r_in}, {self.r_out})")
        if self.n_r < 2:
            raise ValueError("n_r >= 2 required")
        if self.n_theta not in (0,) and self.n_theta < 4:
            raise ValueError("polar grids need n_theta >= 4")

    @classmethod
    def for_index(cls, i: int, n_r: int, n_theta: int = 0) -> "AnnulusGrid":
        if i < 2:
            raise ValueError("annulus index i >= 2 required")
        return cls(1.0 / (i + 1), i + 1.0, n_r, n_theta, i)

    @property
    def mode(self) -> str:
        return "polar" if self.n_theta else "radial"

    @property
    def r(self) -> np.ndarray:
        return np.geomspace(self.r_in, self.r_out, self.n_r + 1)

    @property
    def ratio(self) -> float:
        return (self.r_out / self.r_in) ** (1.0 / self.n_r)

    @property
    def theta(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.n_theta) / self.n_theta if self.n_theta else np.zeros(0)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n_r + 1, self.n_theta) if self.n_theta else (self.n_r + 1,)

    def radii(self) -> np.ndarray:
        """Radius of every node, in node shape."""
        if self.n_theta:
            return np.repeat(self.r[:, None], self.n_theta, axis=1)
        return self.r

    def boundary_mask(self) -> np.ndarray:
        m = np.zeros(self.shape, dtype=bool)
        m[0] = True
        m[-1] = True
        return m

    def h_min(self) -> float:
        r = self.r
        h = float(np.min(np.diff(r)))
        if self.n_theta:
            h = min(h, r[0] * 2 * np.pi / self.n_theta)
        return h

    def describe(self) -> dict:
        return {"r_in": self.r_in, "r_out": self.r_out, "n_r": self.n_r,
                "n_theta": self.n_theta, "index": self.index, "mode": self.mode}

    @classmethod
    def from_dict(cls, d: dict) -> "AnnulusGrid":
        return cls(float(d["r_in"]), float(d["r_out"]), int(d["n_r"]),
                   int(d.get("n_theta", 0)), d.get("index"))


@dataclass
class Field:
    grid: AnnulusGrid
    values: np.ndarray
    time: float
    mode: str | None = None  # "sub" / "super"
    clamped: int = 0
    n: int = 2
    p: float | None = None

    def __post_init__(self):
        if self.values.shape != self.grid.shape:
            raise ValueError(f"values shape {self.values.shape} != grid shape {self.grid.shape}")

    def replace_values(self, values, time) -> "Field":
        return Field(self.grid, values, time, self.mode, self.clamped, self.n, self.p)


@dataclass(frozen=True)
class StepperOptions:
    scheme: str = "proximal"
    dt: float = 1e-2
    epsilon: float | None = None  # None: 1e-6 times the field scale
    tol: float = 1e-12
    max_iter: int = 60

    def __post_init__(self):
        if self.scheme not in ("proximal", "explicit"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if not self.dt > 0:
            raise ValueError("dt > 0 required")
        if self.epsilon is not None and self.epsilon < 0:
            raise ValueError("epsilon >= 0 required")

    @classmethod
    def from_dict(cls, d: dict) -> "StepperOptions":
        return cls(**d)


# -- discrete energy ----------------------------------------------------------

class PDirichlet:
    """Discrete p-Dirichlet energy on an annulus grid.

    The squared gradient in cell c is s_c = sum_m coef_m (D w)_m^2, where the
    rows of D are scaled finite differences belonging to that cell.
    """

    def __init__(self, grid: AnnulusGrid, n: int, p: float):
        if grid.n_theta and n != 2:
            raise ValueError("polar grids are two-dimensional (n = 2)")
        self.grid, self.n, self.p = grid, n, p
        r = grid.r
        N = grid.n_r
        rm = 0.5 * (r[:-1] + r[1:])
        if grid.n_theta == 0:
            rows = np.repeat(np.arange(N), 2)
            cols = np.stack([np.arange(N), np.arange(1, N + 1)], axis=1).ravel()
            h = np.diff(r)
            vals = np.stack([-1.0 / h, 1.0 / h], axis=1).ravel()
            self.D = sp.csr_matrix((vals, (rows, cols)), shape=(N, N + 1))
            self.coef = np.ones(N)
            self.cell = np.arange(N)
            w = sphere_area(n) / n
            self.vol = w * (r[1:] ** n - r[:-1] ** n)
            half_in = w * (rm ** n - r[:-1] ** n)
            half_out = w * (r[1:] ** n - rm ** n)
            mass = np.zeros(N + 1)
            np.add.at(mass, np.arange(N), half_in)
            np.add.at(mass, np.arange(1, N + 1), half_out)
            self.n_cells = N
        else:
            M = grid.n_theta
            dth = 2 * np.pi / M
            j, k = np.meshgrid(np.arange(N), np.arange(M), indexing="ij")
            j, k = j.ravel(), k.ravel()
            k1 = (k + 1) % M
            node = lambda jj, kk: jj * M + kk
            cell = j * M + k
            hr = (r[1:] - r[:-1])[j]
            pairs = [
                (node(j, k), node(j + 1, k), 1.0 / hr),
                (node(j, k1), node(j + 1, k1), 1.0 / hr),
                (node(j, k), node(j, k1), 1.0 / (r[j] * dth)),
                (node(j + 1, k), node(j + 1, k1), 1.0 / (r[j + 1] * dth)),
            ]
            a = np.concatenate([pp[0] for pp in pairs])
            b = np.concatenate([pp[1] for pp in pairs])
            sc = np.concatenate([pp[2] for pp in pairs])
            nd = a.size
            rows = np.repeat(np.arange(nd), 2)
            cols = np.stack([a, b], axis=1).ravel()
            vals = np.stack([-sc, sc], axis=1).ravel()
            self.D = sp.csr_matrix((vals, (rows, cols)), shape=(nd, (N + 1) * M))
            self.coef = np.full(nd, 0.5)
            self.cell = np.tile(cell, 4)
            self.vol = (0.5 * dth * (r[1:] ** 2 - r[:-1] ** 2))[j]
            q_in = (0.25 * dth * (rm ** 2 - r[:-1] ** 2))[j]
            q_out = (0.25 * dth * (r[1:] ** 2 - rm ** 2))[j]
            mass = np.zeros((N + 1) * M)
            for jj, kk, q in ((j, k, q_in), (j, k1, q_in), (j + 1, k, q_out), (j + 1, k1, q_out)):
                np.add.at(mass, node(jj, kk), q)
            self.n_cells = N * M
        self.mass = mass
        nd = self.D.shape[0]
        self.S = sp.csr_matrix((self.coef, (self.cell, np.arange(nd))), shape=(self.n_cells, nd))
        bmask = grid.boundary_mask().ravel()
        self.interior = np.flatnonzero(~bmask)
        self.boundary = np.flatnonzero(bmask)
        D = self.D.tocsc()
        self.D_I = D[:, self.interior].tocsr()
        self.D_B = D[:, self.boundary].tocsr()

    # psi(s) = (s + eps^2)^{p/2} / p and its derivatives in s
    def _psi(self, s, eps):
        return (s + eps * eps) ** (self.p / 2) / self.p

    def _dpsi(self, s, eps):
        return 0.5 * (s + eps * eps) ** ((self.p - 2) / 2)

    def _ddpsi(self, s, eps):
        if self.p == 2:
            return np.zeros_like(s)
        base = s + eps * eps
        with np.errstate(divide="ignore"):
            out = 0.25 * (self.p - 2) * base ** ((self.p - 4) / 2)
        return np.where(np.isfinite(out), out, 0.0)

    def grad_sq(self, w):
        d = self.D @ np.ravel(w)
        return d, self.S @ (d * d)

    def energy(self, w, eps: float = 0.0) -> float:
        _, s = self.grad_sq(w)
        return float(np.sum(self.vol * self._psi(s, eps)))

    def gradient(self, w, eps: float = 0.0):
        """dE/dw at every node (boundary entries included)."""
        d, s = self.grad_sq(w)
        a = (self.vol * self._dpsi(s, eps))[self.cell]
        return self.D.T @ (2.0 * self.coef * a * d)

    def hessian_interior(self, w, eps: float = 0.0):
        d, s = self.grad_sq(w)
        a = (self.vol * self._dpsi(s, eps))[self.cell]
        H = self.D_I.T @ sp.diags(2.0 * self.coef * a) @ self.D_I
        if self.p != 2:
            B = sp.csr_matrix((2.0 * self.coef * d, (self.cell, np.arange(d.size))),
                              shape=self.S.shape) @ self.D_I
            H = H + B.T @ sp.diags(self.vol * self._ddpsi(s, eps)) @ B
        return H

    def gradient_magnitude_cells(self, w):
        _, s = self.grad_sq(w)
        return np.sqrt(s)

    def l2_sq(self, w):
        w = np.ravel(w)
        return float(np.sum(self.mass * w * w))


# -- stepping -----------------------------------------------------------------

@dataclass
class StepStats:
    t: float
    scheme: str
    iterations: int
    energy_old: float
    energy_new: float
    distance: float  # ||new - prev||^2 / (2 dt), lumped mass norm
    drift: bool
    boundary_changed: bool

    @property
    def energy_inequality_slack(self) -> float:
        """E(old) - E(new) - ||new-old||^2/(2dt); >= 0 for an exact minimizing step."""
        return self.energy_old - self.energy_new - self.distance


class PLaplaceSolver:
    """Time stepper for v_t = Delta_p v + xi'(t).grad v with Dirichlet data.

    ``boundary(t)`` returns the full node array whose boundary entries are
    imposed at time t; ``velocity(t)`` returns xi'(t) (None for no drift).
    """

    def __init__(self, grid: AnnulusGrid, n: int, p: float, opts: StepperOptions,
                 boundary: Callable[[float], np.ndarray],
                 velocity: Callable[[float], np.ndarray] | None = None):
        self.grid, self.n, self.p, self.opts = grid, n, p, opts
        self.op = PDirichlet(grid, n, p)
        self.boundary = boundary
        self.velocity = velocity
        if velocity is not None and grid.n_theta == 0:
            raise ValueError("radial grids carry no drift; use a polar grid")
        self.history: list[StepStats] = []
        self.eps: float | None = opts.epsilon

    def _eps_for(self, w):
        if self.eps is None:
            self.eps = 1e-6 * (float(np.max(np.abs(w))) or 1.0)
        return self.eps

    # drift: v <- v + dt * (a_r v_r + a_theta v_theta / r), upwinded and
    # sub-cycled so that each substep has CFL number <= max_cfl
    def advect(self, w: np.ndarray, t: float, dt: float, max_cfl: float = 0.9) -> np.ndarray:
        xi_dot = np.asarray(self.velocity(t), dtype=float)
        if not np.any(xi_dot):
            return w
        g = self.grid
        r = g.r
        th = g.theta
        a_r = xi_dot[0] * np.cos(th) + xi_dot[1] * np.sin(th)
        a_t = -xi_dot[0] * np.sin(th) + xi_dot[1] * np.cos(th)
        dth = 2 * np.pi / g.n_theta
        hr = np.diff(r)
        cfl = dt * (np.max(np.abs(a_r)) / hr.min() + np.max(np.abs(a_t)) / (r[0] * dth))
        n_sub = max(1, math.ceil(cfl / max_cfl))
        if n_sub > 10_000:
            raise StabilityError(f"advection CFL number {cfl:.3g} needs {n_sub} substeps")
        h = dt / n_sub
        pos_r = (a_r > 0)[None, :]
        pos_t = (a_t > 0)[None, :]
        out = w
        for _ in range(n_sub):
            dr = (out[1:] - out[:-1]) / hr[:, None]
            fwd_r = np.zeros_like(out)
            bwd_r = np.zeros_like(out)
            fwd_r[:-1] = dr
            bwd_r[1:] = dr
            fwd_t = (np.roll(out, -1, axis=1) - out) / dth
            bwd_t = (out - np.roll(out, 1, axis=1)) / dth
            rate = (a_r[None, :] * np.where(pos_r, fwd_r, bwd_r)
                    + a_t[None, :] * np.where(pos_t, fwd_t, bwd_t) / r[:, None])
            nxt = out + h * rate
            nxt[0] = w[0]
            nxt[-1] = w[-1]
            out = nxt
        return out

    def explicit_dt_bound(self, w) -> float:
        eps = self._eps_for(w)
        gm = self.op.gradient_magnitude_cells(w)
        coeff = float(np.max((gm ** 2 + eps ** 2) ** ((self.p - 2) / 2)))
        h = self.grid.h_min()
        return 0.2 * h * h / ((self.p - 1) * coeff)

    def step(self, f: Field, dt: float | None = None) -> Field:
        dt = self.opts.dt if dt is None else dt
        t_new = f.time + dt
        w_old = np.array(f.values, dtype=float)
        drift = False
        w_prev = w_old
        if self.velocity is not None:
            w_adv = self.advect(w_old, f.time, dt)
            drift = w_adv is not w_old
            w_prev = w_adv
        bnd = np.asarray(self.boundary(t_new), dtype=float).ravel()
        op = self.op
        eps = self._eps_for(w_old)
        flat_prev = w_prev.ravel()
        b_idx, i_idx = op.boundary, op.interior
        w = flat_prev.copy()
        boundary_changed = not np.array_equal(w[b_idx], bnd[b_idx])
        w[b_idx] = bnd[b_idx]
        E_old = op.energy(w_old, eps)

        if self.opts.scheme == "explicit":
            bound = self.explicit_dt_bound(w_prev)
            if dt > bound:
                raise StabilityError(f"explicit dt={dt:.3g} exceeds stability bound {bound:.3g}")
            g = op.gradient(flat_prev, eps)
            w_new = flat_prev.copy()
            w_new[i_idx] -= dt * g[i_idx] / op.mass[i_idx]
            w_new[b_idx] = bnd[b_idx]
            iters = 1
        else:
            w_new, iters = self._prox(w, flat_prev, dt, eps)

        w_new = w_new.reshape(self.grid.shape)
        w_new, clamped = _clamp(w_new)
        dist = op.l2_sq(w_new - w_prev) / (2 * dt)
        self.history.append(StepStats(t_new, self.opts.scheme, iters, E_old,
                                      op.energy(w_new, eps), dist, drift, boundary_changed))
        return Field(self.grid, w_new, t_new, f.mode, f.clamped + clamped, self.n, self.p)

    def _prox(self, w, prev, dt, eps):
        op = self.op
        I = op.interior
        m_I = op.mass[I] / dt

        def objective(x):
            diff = x[I] - prev[I]
            return op.energy(x, eps) + 0.5 * float(np.sum(m_I * diff * diff))

        F = objective(w)
        scale = abs(F) + op.l2_sq(prev) / dt + 1e-300
        for it in range(1, self.opts.max_iter + 1):
            g = op.gradient(w, eps)[I] + m_I * (w[I] - prev[I])
            H = op.hessian_interior(w, eps) + sp.diags(m_I)
            step = -_spd_solve(H, g)
            dec = -float(g @ step)
            if dec <= 2 * self.opts.tol * scale:
                # quadratic regime: the full step is safe and keeps slow relaxation moving
                w = w.copy()
                w[I] += step
                return w, it
            tau = 1.0
            for _ in range(60):
                trial = w.copy()
                trial[I] += tau * step
                Ft = objective(trial)
                if Ft <= F - 1e-4 * tau * dec:
                    break
                tau *= 0.5
            else:
                if dec <= 1e-8 * scale:
                    return w, it  # stuck at round-off level
                raise NonconvergenceError(f"line search failed (decrement {dec:.3e})")
            w, F = trial, Ft
        raise NonconvergenceError(f"proximal Newton did not converge in {self.opts.max_iter} iterations")


def _spd_solve(H, g):
    """Solve with the SPD Hessian; node ordering makes it banded, so try Cholesky on the band."""
    H = H.tocoo()
    upper = H.col >= H.row
    off = H.col[upper] - H.row[upper]
    u = int(off.max()) if off.size else 0
    n = H.shape[0]
    if (u + 1) * n <= 5e7:
        ab = np.zeros((u + 1, n))
        np.add.at(ab, (u - off, H.col[upper]), H.data[upper])
        try:
            return solveh_banded(ab, g, check_finite=False)
        except LinAlgError:
            pass
    return spsolve(H.tocsc(), g)


def _clamp(w):
    neg = w < 0
    if not np.any(neg):
        return w, 0
    worst = float(-w.min())
    if worst > 1e-12 * max(1.0, float(np.abs(w).max())):
        raise NegativeField(f"field dropped to {-worst:.3e}")
    return np.where(neg, 0.0, w), int(neg.sum())


# -- barrier-driven problem on Omega_i -----------------------------------------

def cutoff_eta(i: int, y) -> np.ndarray:
    """Smooth cutoff: 1 on 1/i <= |y| <= i, 0 off Omega_i, C^1 smoothstep between.

    ``y`` is a point (or an array of points along the last axis).
    """
    if i < 2:
        raise ValueError("i >= 2 required")
    y = np.asarray(y, dtype=float)
    r = np.linalg.norm(y, axis=-1) if y.ndim else np.abs(y)
    return eta_radial(i, r)


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def eta_radial(i, r):
    r = np.asarray(r, dtype=float)
    a0, a1 = 1.0 / (i + 1), 1.0 / i
    b0, b1 = float(i), i + 1.0
    up = _smoothstep((r - a0) / (a1 - a0))
    down = _smoothstep((b1 - r) / (b1 - b0))
    return np.minimum(up, down)


def barrier_values(params: BarrierParams, mode: str, r, t):
    if mode == "sub":
        return br.sub_value(params, r, t)
    if mode == "super":
        return br.super_value(params, r, t)
    raise ValueError(f"mode must be 'sub' or 'super' (got {mode!r})")


def blend_initial(i: int, v0: Callable, params: BarrierParams, mode: str,
                  grid: AnnulusGrid, check: bool = True) -> Field:
    """v0 * eta_i + barrier(., 0) * (1 - eta_i) on the grid nodes."""
    r = grid.radii()
    base = np.asarray(v0(r), dtype=float)
    if check:
        lo = br.sub_value(params, r, 0.0)
        hi = br.super_value(params, r, 0.0)
        tol = 1e-12 * np.maximum(1.0, hi)
        if np.any(base < lo - tol) or np.any(base > hi + tol):
            raise OrderingViolation("initial datum leaves the barrier envelope at t = 0")
    eta = eta_radial(i, r)
    vals = base * eta + barrier_values(params, mode, r, 0.0) * (1.0 - eta)
    return Field(grid, vals, 0.0, mode, n=params.cfg.n, p=params.cfg.p)


def _is_stationary(traj: Trajectory, horizon: float) -> bool:
    t = np.linspace(0.0, horizon, 64)
    return not np.any(traj.velocity(t))


def make_solver(grid: AnnulusGrid, params: BarrierParams, mode: str, opts: StepperOptions,
                traj: Trajectory | None, frozen_boundary: bool = False) -> PLaplaceSolver:
    r = grid.radii()
    if frozen_boundary:
        fixed = barrier_values(params, mode, r, 0.0)
        boundary = lambda t: fixed
    else:
        boundary = lambda t: barrier_values(params, mode, r, t)
    velocity = None
    if traj is not None and not _is_stationary(traj, max(1.0, grid.r_out)):
        if grid.n_theta == 0:
            raise ValueError("a moving curve needs the polar (n = 2) grid")
        velocity = lambda t: traj.velocity(t)[:2]
    return PLaplaceSolver(grid, params.cfg.n, params.cfg.p, opts, boundary, velocity)


def step(field: Field, opts: StepperOptions, params: BarrierParams,
         traj: Trajectory | None, mode: str) -> Field:
    """One step from ``field`` with barrier Dirichlet data at the new time."""
    return make_solver(field.grid, params, mode, opts, traj).step(field)


def _steps(T, dt):
    n = max(1, int(round(T / dt)))
    return n, T / n


def solve_on_annulus(i: int, T: float, mode: str, v0: Callable, opts: StepperOptions,
                     params: BarrierParams, traj: Trajectory | None, n_r: int = 512,
                     n_theta: int = 0, save_every: int = 1, frozen_boundary: bool = False,
                     boundary_mode: str | None = None, stats: list | None = None) -> list[Field]:
    """Snapshots of v_i^{mode} from t = 0 to T on Omega_i.

    ``boundary_mode`` (default: ``mode``) selects which barrier supplies the
    Dirichlet and blending data; setting it to the other family is a
    deliberate corruption used as a negative control.
    """
    if T > i:
        raise ValueError(f"horizon T={T} exceeds the annulus index i={i}")
    grid = AnnulusGrid.for_index(i, n_r, n_theta)
    bmode = boundary_mode or mode
    f = blend_initial(i, v0, params, bmode, grid)
    f.mode = mode
    solver = make_solver(grid, params, bmode, opts, traj, frozen_boundary)
    n_steps, dt = _steps(T, opts.dt)
    out = [f]
    for k in range(1, n_steps + 1):
        f = solver.step(f, dt)
        if k % save_every == 0 or k == n_steps:
            out.append(f)
    if stats is not None:
        stats.extend(solver.history)
    return out


# -- interpolation between grids -------------------------------------------------

def sample(field: Field, r, theta=None) -> np.ndarray:
    """Interpolate a field at radii ``r`` (and angles, polar grids); linear in log r.

    Points outside the annulus give NaN.
    """
    g = field.grid
    r = np.asarray(r, dtype=float)
    lr = np.log(g.r)
    with np.errstate(divide="ignore", invalid="ignore"):
        x = (np.log(r) - lr[0]) / (lr[-1] - lr[0]) * g.n_r
    inside = (r >= g.r_in * (1 - 1e-12)) & (r <= g.r_out * (1 + 1e-12))
    x = np.clip(_snap(np.nan_to_num(x)), 0.0, g.n_r)
    j = np.minimum(np.floor(x).astype(int), g.n_r - 1)
    fx = x - j
    v = field.values
    if g.n_theta == 0:
        out = v[j] * (1 - fx) + v[j + 1] * fx
    else:
        th = np.zeros_like(r) if theta is None else np.asarray(theta, dtype=float)
        M = g.n_theta
        y = _snap(np.mod(th, 2 * np.pi) / (2 * np.pi) * M)
        k = np.floor(y).astype(int) % M
        fy = y - np.floor(y)
        k1 = (k + 1) % M
        out = ((v[j, k] * (1 - fy) + v[j, k1] * fy) * (1 - fx)
               + (v[j + 1, k] * (1 - fy) + v[j + 1, k1] * fy) * fx)
    return np.where(inside, out, np.nan)


def _snap(x, tol=1e-9):
    """Round index coordinates that sit on a node up to round-off, so nodes sample exactly."""
    r = np.round(x)
    return np.where(np.abs(x - r) < tol, r, x)


# -- nested domains ------------------------------------------------------------------

CHAIN = (
    ("barrier_sub <= v_i^-", "v-  <= v_i^-"),
    ("v_i^- <= v_j^-", "v_i^- <= v_j^- (i < j)"),
    ("v_j^- <= v_j^+", "v_j^- <= v_j^+"),
    ("v_j^+ <= v_i^+", "v_j^+ <= v_i^+ (i < j)"),
    ("v_i^+ <= barrier_super", "v_i^+ <= v+"),
)


@dataclass
class NestedReport:
    indices: list[int]
    times: list[float]
    violations: dict[str, float]   # max of (left - right), positive means violated
    scale: float                   # max v+ over the sample points and times
    rel_tol: float = 1e-2
    pair_table: list[dict] = field(default_factory=list)

    @property
    def tol(self) -> float:
        return self.rel_tol * self.scale

    def positive(self, name) -> float:
        return max(0.0, self.violations[name])

    @property
    def passed(self) -> bool:
        return all(self.positive(k) <= self.tol for k in self.violations)

    def to_dict(self) -> dict:
        return {
            "anchor": "approximant chain v- <= v_i^- <= v_j^- <= v_j^+ <= v_i^+ <= v+",
            "indices": self.indices, "n_times": len(self.times),
            "violations": self.violations, "scale": self.scale, "tol": self.tol,
            "passed": self.passed, "pairs": self.pair_table,
        }


def nested_run(i_min: int, i_max: int, T: float, v0: Callable, opts: StepperOptions,
               params: BarrierParams, traj: Trajectory | None, n_r: int = 512,
               n_theta: int = 0, save_every: int = 1, swap_boundary: bool = False,
               rel_tol: float = 1e-2, runs: dict | None = None) -> NestedReport:
    """Solve on Omega_i for i_min..i_max in both families and compare on Omega_{i_min}.

    Every run uses the same time step so snapshots share time stamps.  With
    ``swap_boundary`` the sub family receives the super barrier's data and
    vice versa.
    """
    if i_min < 2 or i_max < i_min:
        raise ValueError("need 2 <= i_min <= i_max")
    if T > i_min:
        raise ValueError(f"horizon T={T} exceeds i_min={i_min}")
    idx = list(range(i_min, i_max + 1))
    sols = {}
    for i in idx:
        for mode in ("sub", "super"):
            bm = {"sub": "super", "super": "sub"}[mode] if swap_boundary else mode
            sols[i, mode] = solve_on_annulus(i, T, mode, v0, opts, params, traj, n_r, n_theta,
                                             save_every, boundary_mode=bm)
    if runs is not None:
        runs.update(sols)
    return chain_report(sols, params, rel_tol)


def chain_report(sols: dict, params: BarrierParams, rel_tol: float = 1e-2) -> NestedReport:
    """Compare finished runs ``sols[(i, mode)]`` (lists of snapshots) on the smallest annulus.

    All runs must share snapshot times and the grid resolution.
    """
    idx = sorted({i for i, _ in sols})
    i_min = idx[0]
    g0 = sols[i_min, "sub"][0].grid
    ref = AnnulusGrid.for_index(i_min, g0.n_r, g0.n_theta)
    rr = ref.radii()
    th = np.broadcast_to(ref.theta[None, :], ref.shape) if ref.n_theta else None
    times = [f.time for f in sols[i_min, "sub"]]
    for key, run in sols.items():
        if len(run) != len(times) or any(abs(f.time - t) > 1e-12 for f, t in zip(run, times)):
            raise ValueError(f"run {key} does not share snapshot times with the others")
    viol = {name: -np.inf for name, _ in CHAIN}
    scale = 0.0
    pairs = {}
    for s, t in enumerate(times):
        vm = br.sub_value(params, rr, t)
        vp = br.super_value(params, rr, t)
        scale = max(scale, float(vp.max()))
        at = {(i, m): sample(sols[i, m][s], rr, th) for i in idx for m in ("sub", "super")}
        for i in idx:
            _upd(viol, pairs, "barrier_sub <= v_i^-", (i,), vm - at[i, "sub"])
            _upd(viol, pairs, "v_j^- <= v_j^+", (i,), at[i, "sub"] - at[i, "super"])
            _upd(viol, pairs, "v_i^+ <= barrier_super", (i,), at[i, "super"] - vp)
            for j in idx:
                if j > i:
                    _upd(viol, pairs, "v_i^- <= v_j^-", (i, j), at[i, "sub"] - at[j, "sub"])
                    _upd(viol, pairs, "v_j^+ <= v_i^+", (i, j), at[j, "super"] - at[i, "super"])
    table = [{"inequality": k[0], "indices": list(k[1]), "max_violation": v}
             for k, v in sorted(pairs.items())]
    viol = {k: (float(v) if np.isfinite(v) else 0.0) for k, v in viol.items()}
    return NestedReport(idx, times, viol, scale, rel_tol, table)


def _upd(viol, pairs, name, key, diff):
    m = float(np.nanmax(diff))
    viol[name] = max(viol[name], m)
    pairs[name, key] = max(pairs.get((name, key), -np.inf), m)


# -- snapshot files ------------------------------------------------------------------
#
# Binary layout: the 8 bytes b"PLSNAP1\n", a little-endian uint32 header
# length L, L bytes of UTF-8 JSON (grid descriptor, time, mode, clamped, n,
# p, shape), then the node values as little-endian float64 in C order.

SNAPSHOT_MAGIC = b"PLSNAP1\n"


def _header(f: Field) -> dict:
    return {"grid": f.grid.describe(), "time": f.time, "mode": f.mode, "clamped": f.clamped,
            "n": f.n, "p": f.p, "shape": list(f.grid.shape)}


def write_snapshot(f: Field, path) -> None:
    head = json.dumps(_header(f), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        fh.write(np.ascontiguousarray(f.values, dtype="<f8").tobytes())


def read_snapshot(path) -> Field:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(SNAPSHOT_MAGIC):
        raise ValueError(f"{path}: not a snapshot file")
    k = len(SNAPSHOT_MAGIC)
    (L,) = struct.unpack("<I", data[k:k + 4])
    head = json.loads(data[k + 4:k + 4 + L])
    vals = np.frombuffer(data[k + 4 + L:], dtype="<f8").astype(float).reshape(head["shape"])
    return Field(AnnulusGrid.from_dict(head["grid"]), vals, float(head["time"]), head["mode"],
                 int(head["clamped"]), int(head["n"]), head["p"])


def write_snapshot_csv(f: Field, path) -> None:
    """Columns r[, theta], value."""
    g = f.grid
    if g.n_theta:
        R, TH = np.meshgrid(g.r, g.theta, indexing="ij")
        cols = np.column_stack([R.ravel(), TH.ravel(), f.values.ravel()])
        header = "r,theta,value"
    else:
        cols = np.column_stack([g.r, f.values])
        header = "r,value"
    np.savetxt(path, cols, delimiter=",", header=header, comments="", fmt="%.17g")
