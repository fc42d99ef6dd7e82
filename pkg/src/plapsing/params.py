"""Hypothesis checks and the constant set (K, C_xi, sigma, delta, A, R, theta)
that defines the super- and subsolution barriers."""

from __future__ import annotations

from dataclasses import dataclass, replace


class ExponentViolation(ValueError):
    """An exponent hypothesis fails; the message names the inequality."""


class ConstraintViolation(ValueError):
    """A derived barrier constant breaks one of its invariants."""


class TuneFailure(RuntimeError):
    """The constant search ran out of budget.

    ``check`` names the certification check that could not be satisfied.
    """

    def __init__(self, check: str, message: str):
        super().__init__(f"{check}: {message}")
        self.check = check


@dataclass(frozen=True)
class ExponentConfig:
    n: int
    p: float
    lam: float
    lam_prime: float
    k: float
    k_prime: float

    @property
    def critical(self) -> float:
        """Exponent (p-n)/(p-1) of the fundamental p-harmonic profile."""
        return (self.p - self.n) / (self.p - 1.0)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "p": self.p,
            "lambda": self.lam,
            "lambda_prime": self.lam_prime,
            "k": self.k,
            "k_prime": self.k_prime,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExponentConfig":
        return cls(
            n=int(d["n"]),
            p=float(d["p"]),
            lam=float(d["lambda"]),
            lam_prime=float(d["lambda_prime"]),
            k=float(d["k"]),
            k_prime=float(d["k_prime"]),
        )


def validate_exponents(cfg: ExponentConfig) -> ExponentConfig:
    """Return ``cfg`` unchanged if every hypothesis on (n, p, lambda, lambda', k, k') holds."""
    if int(cfg.n) != cfg.n or cfg.n < 2:
        raise ExponentViolation(f"n >= 2 required (got n={cfg.n})")
    if not cfg.p > cfg.n:
        raise ExponentViolation(f"p > n required (got p={cfg.p}, n={cfg.n})")
    crit = cfg.critical
    if not cfg.lam > 0:
        raise ExponentViolation(f"0 < lambda required (got lambda={cfg.lam})")
    if not cfg.lam < crit:
        raise ExponentViolation(
            f"lambda < (p-n)/(p-1) = {crit!r} required (got lambda={cfg.lam})"
        )
    if not crit < cfg.lam_prime:
        raise ExponentViolation(
            f"(p-n)/(p-1) = {crit!r} < lambda' required (got lambda'={cfg.lam_prime})"
        )
    if not cfg.lam_prime < 1:
        raise ExponentViolation(f"lambda' < 1 required (got lambda'={cfg.lam_prime})")
    if not cfg.k_prime > 0:
        raise ExponentViolation(f"k' > 0 required (got k'={cfg.k_prime})")
    if not cfg.k > cfg.k_prime:
        raise ExponentViolation(f"k > k' required (got k={cfg.k}, k'={cfg.k_prime})")
    return cfg


def K_terms(cfg: ExponentConfig) -> tuple[float, float, float, float, float]:
    lam, lp, k, kp = cfg.lam, cfg.lam_prime, cfg.k, cfg.k_prime
    return (
        1.0,
        2.0 ** (lp - lam) * k,
        (1.0 + lp / lam) ** lp * k,
        2.0 ** (lp - lam) / kp,
        (2.0 * lp / lam) ** lam * 2.0 ** (lp - lam) / kp,
    )


def min_K(cfg: ExponentConfig) -> float:
    """Lower bound that K must strictly exceed for both barriers to be ordered."""
    return max(K_terms(cfg))


@dataclass(frozen=True)
class BarrierParams:
    cfg: ExponentConfig
    K: float
    A: float
    c_xi: float
    sigma: float
    delta: float
    R: float
    theta: float
    b: float

    def to_dict(self) -> dict:
        return {
            "config": self.cfg.to_dict(),
            "K": self.K,
            "A": self.A,
            "c_xi": self.c_xi,
            "sigma": self.sigma,
            "delta": self.delta,
            "R": self.R,
            "theta": self.theta,
            "b": self.b,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BarrierParams":
        cfg = validate_exponents(ExponentConfig.from_dict(d["config"]))
        return derive_structural(
            cfg, sigma=float(d["sigma"]), K=float(d["K"]),
            c_xi=float(d["c_xi"]), A=float(d["A"]),
        )

    def with_overrides(self, **kw) -> "BarrierParams":
        """Copy with some constants replaced, skipping the invariant checks.

        Used to build deliberately broken parameter sets for negative controls.
        """
        return replace(self, **kw)


def derive_structural(cfg: ExponentConfig, sigma: float, K: float,
                      c_xi: float, A: float) -> BarrierParams:
    lam, lp, p = cfg.lam, cfg.lam_prime, cfg.p
    R = lp / lam
    theta = 1.0 / (p - 1.0 - (p - 2.0) * lp)
    delta = (2.0 * lp - lam) / (2.0 * lp) * sigma
    if not 0.0 < sigma < 1.0:
        raise ConstraintViolation(f"0 < sigma < 1 required (got {sigma})")
    b = sigma ** lp * (sigma - delta) ** (-lam)
    bound = min_K(cfg)
    if not K > bound:
        raise ConstraintViolation(f"K > {bound!r} required (got K={K})")
    if not 0.0 < c_xi < 1.0:
        raise ConstraintViolation(f"0 < c_xi < 1 required (got {c_xi})")
    if not A > 1.0:
        raise ConstraintViolation(f"A > 1 required (got {A})")
    if not (R > 1.0 and theta > 0.0 and 0.0 < delta < sigma):
        raise ConstraintViolation(
            f"structural constants out of range: R={R}, theta={theta}, delta={delta}"
        )
    return BarrierParams(cfg=cfg, K=K, A=A, c_xi=c_xi, sigma=sigma,
                         delta=delta, R=R, theta=theta, b=b)


@dataclass(frozen=True)
class SearchOptions:
    """Knobs for :func:`tune_constants`.

    ``fixed_*`` pin a constant instead of searching for it.
    """

    K_margin: float = 1.05
    r_min: float = 1e-4
    r_max: float = 1e3
    n_r: int = 200
    t_max: float = 100.0
    t_min_positive: float = 1e-6
    n_t: int = 100
    check_margin: float = 1e-9
    c_xi_start: float = 0.5
    c_xi_steps: int = 60
    sigma_start: float = 0.5
    sigma_halvings: int = 40
    A_start: float = 2.0
    A_doublings: int = 60
    fixed_c_xi: float | None = None
    fixed_sigma: float | None = None
    fixed_A: float | None = None

    def grid(self):
        from .barriers import SampleGrid
        return SampleGrid.default(self.r_min, self.r_max, self.n_r,
                                  self.t_max, self.n_t, self.t_min_positive)

    @classmethod
    def from_dict(cls, d: dict) -> "SearchOptions":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown tuning option(s): {sorted(unknown)}")
        return cls(**d)


def tune_constants(cfg: ExponentConfig, search: SearchOptions | None = None) -> BarrierParams:
    """Find a certified constant set.

    Order: K from its lower bound, then C_xi (largest value on a bisection
    that keeps the inner supersolution residual nonnegative), then sigma by
    halving (inner subsolution), then A by doubling (both outer pieces).
    Everything is re-certified with the final constants.
    """
    from . import barriers as br

    search = search or SearchOptions()
    validate_exponents(cfg)
    grid = search.grid()
    margin = search.check_margin
    K = search.K_margin * min_K(cfg)

    def make(c_xi, sigma, A):
        return derive_structural(cfg, sigma=sigma, K=K, c_xi=c_xi, A=A)

    def passes(name, prm):
        return br.residual_check(prm, grid, name, margin).passed

    A = search.fixed_A if search.fixed_A is not None else search.A_start
    sigma0 = search.fixed_sigma if search.fixed_sigma is not None else search.sigma_start

    if search.fixed_c_xi is not None:
        c_xi = search.fixed_c_xi
        if not passes("super_inner", make(c_xi, sigma0, A)):
            raise TuneFailure("super_inner", f"fails with fixed c_xi={c_xi}")
    else:
        c_xi = search.c_xi_start
        if not passes("super_inner", make(c_xi, sigma0, A)):
            lo, hi = 0.0, c_xi
            for _ in range(search.c_xi_steps):
                mid = 0.5 * (lo + hi)
                if passes("super_inner", make(mid, sigma0, A)):
                    lo = mid
                else:
                    hi = mid
            if lo == 0.0:
                raise TuneFailure("super_inner",
                                  f"no c_xi found in {search.c_xi_steps} bisection steps")
            c_xi = lo

    sigma = sigma0
    if search.fixed_sigma is None:
        for _ in range(search.sigma_halvings):
            if passes("sub_inner", make(c_xi, sigma, A)):
                break
            sigma *= 0.5
        else:
            raise TuneFailure("sub_inner",
                              f"no sigma found in {search.sigma_halvings} halvings")
    elif not passes("sub_inner", make(c_xi, sigma, A)):
        raise TuneFailure("sub_inner", f"fails with fixed sigma={sigma}")

    if search.fixed_A is None:
        for _ in range(search.A_doublings):
            prm = make(c_xi, sigma, A)
            if passes("super_outer", prm) and passes("sub_outer", prm):
                break
            A *= 2.0
        else:
            prm = make(c_xi, sigma, A)
            bad = "super_outer" if not passes("super_outer", prm) else "sub_outer"
            raise TuneFailure(bad, f"no A found in {search.A_doublings} doublings")

    prm = make(c_xi, sigma, A)
    report = br.certify(prm, grid, margin=margin)
    if not report.passed:
        first = report.first_failure()
        raise TuneFailure(first.name,
                          f"final re-certification failed (worst margin {first.worst_margin:.3e})")
    return prm


__all__ = [
    "ExponentConfig", "BarrierParams", "SearchOptions",
    "ExponentViolation", "ConstraintViolation", "TuneFailure",
    "validate_exponents", "min_K", "K_terms", "derive_structural", "tune_constants",
]
