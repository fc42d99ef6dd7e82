"""Acceptance gate: one check per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py`` (the lines appear in the
terminal summary) or directly with ``python tests/test_acceptance.py``.
"""

from __future__ import annotations

import shutil
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from plapsing import analysis as an
from plapsing import barriers as br
from plapsing import cli
from plapsing import curve as cv
from plapsing import solver as sv
from plapsing.params import BarrierParams, ExponentConfig

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "reference.toml"
REFERENCE = ExponentConfig(n=2, p=4.0, lam=0.5, lam_prime=0.8, k=2.0, k_prime=1.0)

RESULTS: dict[int, tuple[bool, str]] = {}
_cache: dict = {}


def record(num: int, passed: bool, detail: str) -> bool:
    RESULTS[num] = (bool(passed), detail)
    print(line(num))
    return passed


def line(num: int) -> str:
    passed, detail = RESULTS[num]
    return f"criterion {num}: {'PASS' if passed else 'FAIL'}  {detail}"


def v0(r):
    return 0.5 * (br.lower_envelope(REFERENCE, r) + br.upper_envelope(REFERENCE, r))


def tuned() -> tuple[BarrierParams, float]:
    """Constants from the CLI tune command and its wall time."""
    if "prm" not in _cache:
        out = Path(tempfile.mkdtemp(prefix="plapsing-accept-"))
        try:
            t0 = time.perf_counter()
            code = cli.main(["tune", str(CONFIG), "--out", str(out)])
            elapsed = time.perf_counter() - t0
            if code != 0:
                raise RuntimeError(f"plapsing tune exited with {code}")
            _cache["prm"] = BarrierParams.from_dict(cli.read_json(out / "params.json"))
            _cache["tune_seconds"] = elapsed
        finally:
            shutil.rmtree(out, ignore_errors=True)
    return _cache["prm"], _cache["tune_seconds"]


# -- 1 ---------------------------------------------------------------------------------

def criterion_1() -> bool:
    t0 = time.perf_counter()
    prm, tune_s = tuned()
    grid = br.SampleGrid.default(1e-4, 1e3, 200, 100.0, 100)
    report = br.certify(prm, grid)
    elapsed = time.perf_counter() - t0
    assert grid.r.size * grid.t.size == 200 * 100
    residual = [report[n] for n in ("super_inner", "super_outer", "sub_inner", "sub_outer")]
    covered = sum(c.n_samples for c in residual)
    # each of the 2 barriers is checked at every sample off its gluing radius
    interface_hits = 2 * 200 * 100 - covered
    bad = [c.name for c in report.checks if not c.passed]
    ok = report.passed and elapsed <= 10.0 and interface_hits <= 2 * 100
    return record(1, ok, f"tune+certify {elapsed:.2f}s (tune {tune_s:.2f}s), "
                         f"{len(report.checks)} checks, {covered} residual samples, "
                         f"worst residual margin {min(c.worst_margin for c in residual):.3g}"
                         + (f", failed: {bad}" if bad else ""))


# -- 2 ---------------------------------------------------------------------------------

def criterion_2() -> bool:
    prm, _ = tuned()
    c = prm.cfg
    t = np.concatenate([[0.0], np.geomspace(1e-4, 100.0, 49)])
    s = 1.0 + prm.A * t
    sup_cf = prm.K * s ** (prm.theta * (c.lam_prime - 1.0)) * c.lam ** 2 / (c.lam + c.lam_prime)
    sg, dl = prm.sigma, prm.delta
    bracket = -c.lam * sg / 2.0  # lambda'(sigma - delta) - lambda sigma after the delta choice
    sub_cf = s ** (-1.0 / (c.p - 2.0)) / prm.K * sg ** (c.lam_prime - 1.0) / (sg - dl) * bracket
    e_sup = np.max(np.abs(br.super_gap(prm, t) / sup_cf - 1.0))
    e_sub = np.max(np.abs(br.sub_gap(prm, t) / sub_cf - 1.0))
    e_bracket = abs((c.lam_prime * (sg - dl) - c.lam * sg) / bracket - 1.0)
    ok = t.size == 50 and e_sup <= 1e-10 and e_sub <= 1e-10 and e_bracket <= 1e-10
    return record(2, ok, f"50 times: super gap rel err {e_sup:.2e}, sub gap rel err {e_sub:.2e}, "
                         f"bracket identity rel err {e_bracket:.2e}")


# -- 3 ---------------------------------------------------------------------------------

def _p_harmonic_residual(n, p, dtype):
    a = (dtype(p) - n) / (dtype(p) - 1)
    r = np.geomspace(dtype(1e-3), dtype(1e3), 1000)
    f, df, ddf = r ** a, a * r ** (a - 1), a * (a - 1) * r ** (a - 2)
    return float(np.max(np.abs(br.radial_p_laplacian(f, df, ddf, r, n, p))))


def criterion_3() -> bool:
    # profile derivatives are formed in extended precision: in float64 the
    # rounding of f' and f'' alone leaves ~1e-8 at r = 1e-3 for (n, p) = (3, 5)
    worst = {}
    for n, p in ((2, 3.0), (2, 4.0), (3, 5.0)):
        worst[n, p] = (_p_harmonic_residual(n, p, np.longdouble),
                       _p_harmonic_residual(n, p, np.float64))
    ok = all(w[0] <= 1e-8 for w in worst.values())
    desc = ", ".join(f"(n,p)=({n},{p:g}) {w[0]:.1e} [float64 inputs {w[1]:.1e}]"
                     for (n, p), w in worst.items())
    return record(3, ok, f"max |Delta_p r^((p-n)/(p-1))| over 1000 r in [1e-3,1e3]: {desc}")


# -- 4 ---------------------------------------------------------------------------------

def _fd_errors(prm, profile, length, r, t):
    P = profile(prm, r, t)
    h = 1e-4 * length(r, t)
    k = 1e-4 * (1.0 + prm.A * t) / prm.A
    fd_r = (profile(prm, r + h, t).value - profile(prm, r - h, t).value) / (2 * h)
    fd_rr = (profile(prm, r + h, t).d_r - profile(prm, r - h, t).d_r) / (2 * h)
    fd_t = (profile(prm, r, t + k).value - profile(prm, r, t - k).value) / (2 * k)
    return max(float(np.max(np.abs(fd / ex - 1.0)))
               for fd, ex in ((fd_r, P.d_r), (fd_rr, P.d_rr), (fd_t, P.d_t)))


def criterion_4() -> bool:
    prm, _ = tuned()
    rng = np.random.default_rng(2024)
    worst = {}
    for name, profile, iface in (("v+", br.super_profile, lambda t: br.rho(prm, t)),
                                 ("v-", br.sub_profile, lambda t: np.full_like(t, prm.sigma))):
        r = np.exp(rng.uniform(np.log(1e-3), np.log(1e2), 4000))
        t = rng.uniform(0.0, 10.0, 4000)
        # off-interface: the whole difference stencil stays on one piece
        keep = np.abs(r / iface(t) - 1.0) > 1e-2
        if name == "v-":
            keep &= r > 2 * prm.delta
        r, t = r[keep][:1000], t[keep][:1000]
        assert r.size == 1000

        def length(rr, tt, name=name):
            if name == "v+":
                return np.where(rr <= br.rho(prm, tt), rr, rr + prm.R * br.rho(prm, tt))
            return np.where(rr <= prm.sigma, rr, rr - prm.delta)

        worst[name] = _fd_errors(prm, profile, length, r, t)
    ok = all(w <= 1e-5 for w in worst.values())
    return record(4, ok, "max rel error of d_r, d_rr, d_t at 1000 random points: "
                  + ", ".join(f"{k} {v:.2e}" for k, v in worst.items()))


# -- 5 ---------------------------------------------------------------------------------

def _radial_runs(n_r, dt, prm):
    key = ("radial", n_r)
    if key not in _cache:
        _cache[key] = {m: sv.solve_on_annulus(3, 1.0, m, v0, sv.StepperOptions(dt=dt), prm, None,
                                              n_r=n_r, save_every=int(round(0.1 / dt)))
                       for m in ("sub", "super")}
    return _cache[key]


def criterion_5() -> bool:
    prm, _ = tuned()
    t0 = time.perf_counter()
    levels = [(512, 1e-2), (1024, 5e-3), (2048, 2.5e-3)]
    runs = [_radial_runs(n_r, dt, prm) for n_r, dt in levels]
    elapsed = time.perf_counter() - t0
    sw = [{m: an.sandwich_check(r[m], prm) for m in r} for r in runs]
    viol = [max(s[m].violation for m in s) for s in sw]
    tol = sw[0]["sub"].tol
    holds = viol[0] <= tol
    # the sandwich violation must shrink by 1.5 under halving; if it is zero
    # already there is nothing to shrink and the clause holds trivially
    shrinks = viol[0] <= 0.0 or viol[1] <= viol[0] / 1.5
    # the discretization error itself must shrink: successive differences on shared nodes
    cauchy = []
    for m in ("sub", "super"):
        d = [max(float(np.max(np.abs(a.values - b.values[::2])))
                 for a, b in zip(runs[k][m], runs[k + 1][m])) for k in (0, 1)]
        cauchy.append(d[0] / d[1])
    converges = min(cauchy) >= 1.5
    ok = holds and shrinks and converges and elapsed <= 120.0
    return record(5, ok, f"max violation {viol[0]:.2e} (512 cells) / {viol[1]:.2e} (1024) "
                         f"vs tol {tol:.3g}; self-convergence ratios sub {cauchy[0]:.2f}, "
                         f"super {cauchy[1]:.2f}; {elapsed:.1f}s")


# -- 6 ---------------------------------------------------------------------------------

def criterion_6() -> bool:
    prm, _ = tuned()
    reps = [sv.nested_run(3, 4, 1.0, v0, sv.StepperOptions(dt=dt), prm, cv.stationary(),
                          n_r=n_r, save_every=int(round(0.1 / dt)))
            for n_r, dt in ((512, 1e-2), (1024, 5e-3))]
    coarse, fine = reps
    holds = coarse.passed and fine.passed
    shrink = {}
    for name, _ in sv.CHAIN:
        a, b = coarse.positive(name), fine.positive(name)
        shrink[name] = a <= 0.0 or b <= a / 1.5
    worst = max(coarse.violations, key=lambda k: coarse.violations[k])
    a, b = coarse.positive(worst), fine.positive(worst)
    ok = holds and all(shrink.values())
    return record(6, ok, f"all five inequalities within tol {coarse.tol:.3g}; largest "
                         f"violation '{worst}' {a:.2e} -> {b:.2e} under refinement")


# -- 7 ---------------------------------------------------------------------------------

def criterion_7() -> bool:
    prm, _ = tuned()
    cfg = prm.cfg
    traj = cv.log_drift(prm.c_xi / 2, prm.A, 2)
    assert cv.admissible(traj, prm.c_xi, prm.A, 1.0)[0]
    t0 = time.perf_counter()
    parts, notes = [], []
    for mode in ("sub", "super"):
        run = sv.solve_on_annulus(3, 1.0, mode, v0, sv.StepperOptions(dt=1e-2), prm, traj,
                                  n_r=256, n_theta=64, save_every=10)
        rep = an.analyze_run(run, prm, traj)
        clauses = {
            "sandwich": rep["sandwich"]["passed"],
            "growth": rep["growth"]["passed"],
            "blowup": rep["gradient_blowup"]["passed"],
            "tracking": rep["tracking"]["passed"],
        }
        parts.append(all(clauses.values()))
        failed = [k for k, v in clauses.items() if not v]
        notes.append(f"v_3^{'-' if mode == 'sub' else '+'}: growth slope "
                     f"{rep['growth']['slope']:.3f}, grad slope "
                     f"{rep['gradient_blowup']['slope']:.3f}"
                     f"{' monotone' if rep['gradient_blowup']['monotone'] else ''}, "
                     f"sandwich viol {rep['sandwich']['violation']:.1e}, hole offset "
                     f"{max(rep['tracking']['hole_offsets']):.1e}"
                     + (f" [fails {', '.join(failed)}]" if failed else ""))
    elapsed = time.perf_counter() - t0
    ok = all(parts) and elapsed <= 600.0
    band = (cfg.lam - 0.05, cfg.lam_prime + 0.05)
    return record(7, ok, f"band [{band[0]:.2f}, {band[1]:.2f}], grad slope <= "
                         f"{(cfg.lam_prime - 1) / 2:.2f}; " + "; ".join(notes)
                         + f"; {elapsed:.0f}s")


# -- 8 ---------------------------------------------------------------------------------

def criterion_8() -> bool:
    prm, _ = tuned()
    stats = []
    for mode in ("sub", "super"):
        sv.solve_on_annulus(3, 1.0, mode, v0, sv.StepperOptions(dt=1e-2), prm, None, n_r=512,
                            frozen_boundary=True, stats=stats)
        sv.solve_on_annulus(3, 0.2, mode, v0, sv.StepperOptions(dt=1e-2), prm, None, n_r=128,
                            n_theta=32, frozen_boundary=True, stats=stats)
    rel = [s.energy_inequality_slack / s.energy_old for s in stats]
    ok = (all(s.scheme == "proximal" and not s.drift and not s.boundary_changed for s in stats)
          and min(rel) >= -1e-8)
    return record(8, ok, f"{len(stats)} zero-drift proximal steps, min "
                         f"(E_old - E_new - dist)/E_old = {min(rel):.2e}")


# -- 9 ---------------------------------------------------------------------------------

def criterion_9() -> bool:
    prm, _ = tuned()
    grid = br.SampleGrid.default()
    small_K = br.check_ordering(prm.with_overrides(K=prm.cfg.k / 2), grid)
    low_A = prm.with_overrides(A=1 + 1e-9)
    outer = {n: br.residual_check(low_A, grid, n) for n in ("super_outer", "sub_outer")}
    ok_adm, ratio = cv.admissible(cv.linear([1e-3, 0.0]), prm.c_xi, prm.A, 100.0)
    failed_outer = [n for n, c in outer.items() if not c.passed]
    ok = (not small_K.passed) and bool(failed_outer) and not ok_adm
    return record(9, ok, f"K=k/2 ordering fails at {small_K.first_failure().name if not small_K.passed else '-'}; "
                         f"A=1+1e-9 fails {failed_outer}; linear curve ratio {ratio:.3g}")


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6,
            criterion_7, criterion_8, criterion_9]


@pytest.mark.parametrize("crit", CRITERIA, ids=[f"criterion_{k}" for k in range(1, 10)])
def test_acceptance(crit):
    assert crit(), line(CRITERIA.index(crit) + 1)


if __name__ == "__main__":
    for crit in CRITERIA:
        crit()
    print()
    for k in sorted(RESULTS):
        print(line(k))
