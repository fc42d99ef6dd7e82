"""Closed-form super/sub-solution barriers and their certification.

Both barriers are radial, glued from an inner and an outer power law.  The
supersolution switches pieces at rho(t) = (1+At)^theta, the subsolution at
sigma.  Every piece comes with exact first and second radial derivatives and
the time derivative, so residuals of the moving-frame equation

    v_t - Delta_p v - xi'(t) . grad v

can be evaluated pointwise.  The drift is worst-cased: |xi'(t)| <= C_xi/(1+At)
and the sign is chosen against the inequality being checked.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .params import BarrierParams


class DomainError(ValueError):
    pass


class InterfacePoint(ValueError):
    """Residual requested on a gluing radius, where the barrier is only C^0."""


class Piece(NamedTuple):
    value: np.ndarray
    d_r: np.ndarray
    d_rr: np.ndarray
    d_t: np.ndarray


@dataclass
class RadialProfile:
    inner: np.ndarray  # True where the inner piece is active
    value: np.ndarray
    d_r: np.ndarray
    d_rr: np.ndarray
    d_t: np.ndarray
    interface_radius: np.ndarray


def _s(prm: BarrierParams, t):
    return 1.0 + prm.A * np.asarray(t, dtype=float)


def rho(prm: BarrierParams, t):
    return _s(prm, t) ** prm.theta


# -- supersolution pieces ---------------------------------------------------

def super_inner(prm: BarrierParams, r, t) -> Piece:
    c = prm.cfg
    r = np.asarray(r, dtype=float)
    s = _s(prm, t)
    a = prm.theta * (c.lam_prime - c.lam)
    amp = prm.K * s ** a
    with np.errstate(divide="ignore", invalid="ignore"):
        value = amp * r ** c.lam
        d_r = amp * c.lam * r ** (c.lam - 1.0)
        d_rr = amp * c.lam * (c.lam - 1.0) * r ** (c.lam - 2.0)
    d_t = prm.K * a * prm.A * s ** (a - 1.0) * r ** c.lam
    return Piece(value, d_r, d_rr, d_t)


def super_outer(prm: BarrierParams, r, t) -> Piece:
    c = prm.cfg
    lp = c.lam_prime
    r = np.asarray(r, dtype=float)
    s = _s(prm, t)
    c0 = prm.K * (1.0 + prm.R) ** (-lp)
    z = r + prm.R * s ** prm.theta
    value = c0 * z ** lp
    d_r = c0 * lp * z ** (lp - 1.0)
    d_rr = c0 * lp * (lp - 1.0) * z ** (lp - 2.0)
    d_t = d_r * prm.R * prm.theta * prm.A * s ** (prm.theta - 1.0)
    return Piece(value, d_r, d_rr, d_t)


# -- subsolution pieces -----------------------------------------------------

def sub_inner(prm: BarrierParams, r, t) -> Piece:
    c = prm.cfg
    lp = c.lam_prime
    m = 1.0 / (c.p - 2.0)
    r = np.asarray(r, dtype=float)
    s = _s(prm, t)
    amp = s ** (-m) / prm.K
    with np.errstate(divide="ignore", invalid="ignore"):
        value = amp * r ** lp
        d_r = amp * lp * r ** (lp - 1.0)
        d_rr = amp * lp * (lp - 1.0) * r ** (lp - 2.0)
    d_t = -m * prm.A * s ** (-m - 1.0) / prm.K * r ** lp
    return Piece(value, d_r, d_rr, d_t)


def sub_outer(prm: BarrierParams, r, t) -> Piece:
    c = prm.cfg
    lam = c.lam
    m = 1.0 / (c.p - 2.0)
    r = np.asarray(r, dtype=float)
    s = _s(prm, t)
    amp = prm.b * s ** (-m) / prm.K
    x = r - prm.delta
    with np.errstate(divide="ignore", invalid="ignore"):
        value = amp * x ** lam
        d_r = amp * lam * x ** (lam - 1.0)
        d_rr = amp * lam * (lam - 1.0) * x ** (lam - 2.0)
    d_t = -m * prm.A * s ** (-m - 1.0) * prm.b / prm.K * x ** lam
    return Piece(value, d_r, d_rr, d_t)


def _glue(inner_mask, pin: Piece, pout: Piece, iface) -> RadialProfile:
    pick = lambda a, b: np.where(inner_mask, a, b)
    return RadialProfile(
        inner=inner_mask,
        value=pick(pin.value, pout.value),
        d_r=pick(pin.d_r, pout.d_r),
        d_rr=pick(pin.d_rr, pout.d_rr),
        d_t=pick(pin.d_t, pout.d_t),
        interface_radius=iface,
    )


def super_profile(prm: BarrierParams, r, t) -> RadialProfile:
    """v+ at radius r and time t (inner piece for r <= rho(t)).

    At r = 0 the value is 0 and d_r is +inf (lambda < 1).
    """
    r, t = np.broadcast_arrays(np.asarray(r, dtype=float), np.asarray(t, dtype=float))
    if np.any(r < 0) or np.any(t < 0):
        raise DomainError("super_profile needs r >= 0 and t >= 0")
    rh = rho(prm, t)
    # the outer piece is evaluated everywhere, so keep its argument positive
    return _glue(r <= rh, super_inner(prm, r, t), super_outer(prm, r, t), rh)


def sub_profile(prm: BarrierParams, r, t) -> RadialProfile:
    """v- at radius r and time t (inner piece for r <= sigma)."""
    r, t = np.broadcast_arrays(np.asarray(r, dtype=float), np.asarray(t, dtype=float))
    if np.any(r < 0) or np.any(t < 0):
        raise DomainError("sub_profile needs r >= 0 and t >= 0")
    inner = r <= prm.sigma
    # the outer piece is undefined for r < delta; feed it a dummy radius there
    r_out = np.where(inner, prm.sigma, r)
    return _glue(inner, sub_inner(prm, r, t), sub_outer(prm, r_out, t),
                 np.full(r.shape, prm.sigma))


def super_value(prm, r, t):
    return super_profile(prm, r, t).value


def sub_value(prm, r, t):
    return sub_profile(prm, r, t).value


def radial_p_laplacian(f, df, ddf, r, n: int, p: float):
    """Delta_p of a radial function from its value and radial derivatives.

    Uses the expanded form |f'|^{p-2} ((p-1) f'' + (n-1) f'/r), extended by
    zero where f' = 0 and p > 2.  ``f`` is accepted for symmetry with the
    profile tuple but does not enter the formula.  Works in whatever float
    dtype the inputs carry.
    """
    r = np.asarray(r)
    if np.any(r <= 0):
        raise DomainError("radial_p_laplacian needs r > 0")
    df = np.asarray(df)
    ddf = np.asarray(ddf)
    out = np.abs(df) ** (p - 2) * ((p - 1) * ddf + (n - 1) * df / r)
    if p > 2:
        out = np.where(df == 0, 0 * out, out)
    return out[()] if np.ndim(out) == 0 else out


# -- residuals ----------------------------------------------------------------

def _residual(prm, prof: RadialProfile, r, t, drift_sign):
    c = prm.cfg
    lap = radial_p_laplacian(prof.value, prof.d_r, prof.d_rr, r, c.n, c.p)
    drift = prm.c_xi / _s(prm, t) * np.abs(prof.d_r)
    res = prof.d_t - lap + drift_sign * drift
    scale = np.abs(prof.d_t) + np.abs(lap) + drift
    return res, scale


def _check_interface(r, iface, what):
    if np.any(np.abs(np.asarray(r) - iface) <= 1e-12 * iface):
        raise InterfacePoint(f"{what}: r on the gluing radius")


def residual_super(prm: BarrierParams, r, t):
    """v+_t - Delta_p v+ - C_xi (1+At)^{-1} |v+_r|; a supersolution needs >= 0."""
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0):
        raise DomainError("residual needs r > 0")
    prof = super_profile(prm, r, t)
    _check_interface(r, prof.interface_radius, "residual_super")
    res, _ = _residual(prm, prof, r, t, -1.0)
    return res[()] if res.ndim == 0 else res


def residual_sub(prm: BarrierParams, r, t):
    """v-_t - Delta_p v- + C_xi (1+At)^{-1} |v-_r|; a subsolution needs <= 0."""
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0):
        raise DomainError("residual needs r > 0")
    prof = sub_profile(prm, r, t)
    _check_interface(r, prof.interface_radius, "residual_sub")
    res, _ = _residual(prm, prof, r, t, +1.0)
    return res[()] if res.ndim == 0 else res


# -- certification ------------------------------------------------------------

@dataclass
class SampleGrid:
    r: np.ndarray
    t: np.ndarray

    @classmethod
    def default(cls, r_min=1e-4, r_max=1e3, n_r=200, t_max=100.0, n_t=100,
                t_min_positive=1e-6) -> "SampleGrid":
        r = np.geomspace(r_min, r_max, n_r)
        t = np.concatenate([[0.0], np.geomspace(t_min_positive, t_max, n_t - 1)])
        return cls(r, t)

    def mesh(self):
        return np.meshgrid(self.r, self.t, indexing="ij")

    def describe(self) -> dict:
        return {
            "r_min": float(self.r.min()), "r_max": float(self.r.max()), "n_r": int(self.r.size),
            "t_min": float(self.t.min()), "t_max": float(self.t.max()), "n_t": int(self.t.size),
        }


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst_margin: float
    worst_r: float | None
    worst_t: float | None
    n_samples: int
    anchor: str = ""

    def to_dict(self) -> dict:
        return {
            "check": self.name, "anchor": self.anchor, "passed": bool(self.passed),
            "worst_margin": self.worst_margin, "worst_r": self.worst_r,
            "worst_t": self.worst_t, "n_samples": self.n_samples,
        }


@dataclass
class CertificationReport:
    checks: list[CheckResult]
    grid: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def first_failure(self) -> CheckResult | None:
        return next((c for c in self.checks if not c.passed), None)

    def __getitem__(self, name) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "grid": self.grid,
                "checks": [c.to_dict() for c in self.checks]}


ANCHORS = {
    "ordering": "barrier ordering v- <= lower envelope <= upper envelope <= v+",
    "matching": "one-sided derivative conditions at the gluing radii",
    "super_inner": "inner supersolution residual >= 0 (worst-case drift)",
    "super_outer": "outer supersolution residual >= 0 (worst-case drift)",
    "sub_inner": "inner subsolution residual <= 0 (worst-case drift)",
    "sub_outer": "outer subsolution residual <= 0 (worst-case drift)",
}


def _worst(name, margin, rr, tt, ok_mask, valid):
    m = np.where(valid, margin, np.inf)
    n = int(valid.sum())
    if n == 0:
        # nothing on the grid falls in this piece: the sign cannot be certified
        return CheckResult(name, False, float("nan"), None, None, 0, ANCHORS.get(name, ""))
    idx = np.unravel_index(np.argmin(m), m.shape)
    passed = bool(np.all(ok_mask[valid]))
    return CheckResult(name, passed, float(m[idx]), float(rr[idx]), float(tt[idx]), n,
                       ANCHORS.get(name, ""))


def lower_envelope(cfg, r):
    return cfg.k_prime * r ** cfg.lam_prime * (1.0 + r) ** (cfg.lam - cfg.lam_prime)


def upper_envelope(cfg, r):
    return cfg.k * r ** cfg.lam * (1.0 + r) ** (cfg.lam_prime - cfg.lam)


def check_ordering(prm: BarrierParams, grid: SampleGrid) -> CertificationReport:
    """v- <= k' r^l' (1+r)^(l-l') <= k r^l (1+r)^(l'-l) <= v+, and v- >= 0.

    Margins are relative: (bigger - smaller) / (|bigger| + |smaller|).
    """
    rr, tt = grid.mesh()
    lo = lower_envelope(prm.cfg, rr)
    up = upper_envelope(prm.cfg, rr)
    vm = sub_value(prm, rr, tt)
    vp = super_value(prm, rr, tt)
    valid = np.ones(rr.shape, dtype=bool)
    checks = []
    for name, small, big in (("ordering.sub_below_lower", vm, lo),
                             ("ordering.lower_below_upper", lo, up),
                             ("ordering.upper_below_super", up, vp)):
        rel = (big - small) / (np.abs(big) + np.abs(small))
        res = _worst(name, rel, rr, tt, rel > 0, valid)
        res.anchor = ANCHORS["ordering"]
        checks.append(res)
    nonneg = _worst("ordering.sub_nonnegative", vm, rr, tt, vm >= 0, valid)
    nonneg.anchor = ANCHORS["ordering"]
    checks.append(nonneg)
    return CertificationReport(checks, grid.describe())


def super_gap(prm: BarrierParams, t):
    """d_r v_in+ - d_r v_out+ at r = rho(t)."""
    rh = rho(prm, t)
    return super_inner(prm, rh, t).d_r - super_outer(prm, rh, t).d_r


def super_gap_closed_form(prm: BarrierParams, t):
    c = prm.cfg
    return (prm.K * _s(prm, t) ** (prm.theta * (c.lam_prime - 1.0))
            * c.lam ** 2 / (c.lam + c.lam_prime))


def sub_gap(prm: BarrierParams, t):
    """d_r v_in- - d_r v_out- at r = sigma."""
    sg = np.full(np.shape(t), prm.sigma)
    return sub_inner(prm, sg, t).d_r - sub_outer(prm, sg, t).d_r


def sub_gap_closed_form(prm: BarrierParams, t):
    c = prm.cfg
    m = 1.0 / (c.p - 2.0)
    sg, dl = prm.sigma, prm.delta
    return (-(c.lam * sg / 2.0) * _s(prm, t) ** (-m) / prm.K
            / (sg - dl) * sg ** (c.lam_prime - 1.0))


def check_matching(prm: BarrierParams, t_samples, rel_tol: float = 1e-10) -> CertificationReport:
    t = np.asarray(t_samples, dtype=float)
    sup = super_gap(prm, t)
    sup_cf = super_gap_closed_form(prm, t)
    sub = sub_gap(prm, t)
    sub_cf = sub_gap_closed_form(prm, t)
    valid = np.ones(t.shape, dtype=bool)
    anchor = ANCHORS["matching"]
    out = []

    def add(name, margin, ok):
        res = _worst(name, margin, rho(prm, t) if name.startswith("matching.super") else
                     np.full(t.shape, prm.sigma), t, ok, valid)
        res.anchor = anchor
        out.append(res)

    add("matching.super_gap_nonnegative", sup / np.abs(sup_cf), sup > 0)
    add("matching.sub_gap_nonpositive", -sub / np.abs(sub_cf), sub < 0)
    err_sup = np.abs(sup - sup_cf) / np.abs(sup_cf)
    add("matching.super_closed_form", rel_tol - err_sup, err_sup <= rel_tol)
    err_sub = np.abs(sub - sub_cf) / np.abs(sub_cf)
    add("matching.sub_closed_form", rel_tol - err_sub, err_sub <= rel_tol)
    return CertificationReport(out, {"n_t": int(t.size),
                                     "t_min": float(t.min()), "t_max": float(t.max())})


def residual_check(prm: BarrierParams, grid: SampleGrid, name: str,
                   margin: float = 1e-9) -> CheckResult:
    """Sign check of one barrier piece over the grid, interface points excluded.

    The reported margin is the signed residual relative to the sum of the
    magnitudes of its three terms, oriented so that positive means the
    required inequality holds; passing needs margin >= ``margin``.
    """
    rr, tt = grid.mesh()
    if name.startswith("super"):
        prof = super_profile(prm, rr, tt)
        res, scale = _residual(prm, prof, rr, tt, -1.0)
        oriented = res / scale
    else:
        prof = sub_profile(prm, rr, tt)
        res, scale = _residual(prm, prof, rr, tt, +1.0)
        oriented = -res / scale
    iface = prof.interface_radius
    off = np.abs(rr - iface) > 1e-9 * iface
    valid = off & (prof.inner if name.endswith("inner") else ~prof.inner)
    out = _worst(name, oriented, rr, tt, oriented >= margin, valid)
    return out


def certify(prm: BarrierParams, grid: SampleGrid | None = None,
            margin: float = 1e-9) -> CertificationReport:
    grid = grid or SampleGrid.default()
    checks = list(check_ordering(prm, grid).checks)
    checks += check_matching(prm, grid.t).checks
    for name in ("super_inner", "super_outer", "sub_inner", "sub_outer"):
        checks.append(residual_check(prm, grid, name, margin))
    return CertificationReport(checks, grid.describe())


def residual_table(prm: BarrierParams, grid: SampleGrid, path) -> None:
    """Write per-sample residuals as CSV (r, t, residual_super, residual_sub)."""
    rr, tt = grid.mesh()
    sp = super_profile(prm, rr, tt)
    sb = sub_profile(prm, rr, tt)
    rs, _ = _residual(prm, sp, rr, tt, -1.0)
    rb, _ = _residual(prm, sb, rr, tt, +1.0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["r", "t", "super_piece", "residual_super", "sub_piece", "residual_sub"])
        for row in zip(rr.ravel(), tt.ravel(), sp.inner.ravel(), rs.ravel(),
                       sb.inner.ravel(), rb.ravel()):
            w.writerow([repr(float(row[0])), repr(float(row[1])),
                        "inner" if row[2] else "outer", repr(float(row[3])),
                        "inner" if row[4] else "outer", repr(float(row[5]))])
