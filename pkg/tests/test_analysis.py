import numpy as np
import pytest

from plapsing import analysis as an
from plapsing import barriers as br
from plapsing import curve as cv
from plapsing import solver as sv
from plapsing.params import ExponentConfig, derive_structural, min_K


def _field(values_of_r, n_r=256, n_theta=0, i=3, t=0.0, mode=None):
    g = sv.AnnulusGrid.for_index(i, n_r, n_theta)
    return sv.Field(g, values_of_r(g.radii()), t, mode, n=2, p=4.0)


@pytest.mark.parametrize("alpha", [0.5, 0.8, 2.0 / 3.0])
@pytest.mark.parametrize("n_theta", [0, 16])
def test_pure_power_law_slope(alpha, n_theta):
    f = _field(lambda r: 3.0 * r ** alpha, n_theta=n_theta)
    fit = an.fit_growth_exponent(f, (0.25, 2.5))
    assert abs(fit.slope - alpha) <= 1e-6
    assert fit.log_prefactor == pytest.approx(np.log(3.0), abs=1e-6)


def test_barrier_inner_pieces(prm):
    t = 0.5  # rho(t) > 2.5, so the whole window lies in the inner supersolution piece
    assert br.rho(prm, t) > 2.5
    sup = _field(lambda r: br.super_inner(prm, r, t).value)
    sub = _field(lambda r: br.sub_inner(prm, r, t).value, n_r=512, i=31)
    lam, lp = prm.cfg.lam, prm.cfg.lam_prime
    assert an.fit_growth_exponent(sup, (0.25, 2.5)).slope == pytest.approx(lam, abs=1e-3)
    w = (1 / 32, prm.sigma)
    assert an.fit_growth_exponent(sub, w).slope == pytest.approx(lp, abs=1e-3)
    bs = an.gradient_blowup_check(sup, (0.25, 2.5))
    bm = an.gradient_blowup_check(sub, w)
    assert bs.slope == pytest.approx(lam - 1, abs=1e-3) and bs.monotone
    assert bm.slope == pytest.approx(lp - 1, abs=1e-3) and bm.monotone


def test_growing_gradient_is_not_monotone_divergence():
    res = an.gradient_blowup_check(_field(lambda r: r ** 2), (0.25, 2.5))
    assert res.slope == pytest.approx(1.0, abs=1e-3) and not res.monotone


def test_degenerate_windows():
    f = _field(lambda r: r ** 0.5, n_r=16)
    with pytest.raises(an.DegenerateWindow):
        an.fit_growth_exponent(f, (0.25, 0.3))
    with pytest.raises(an.DegenerateWindow):
        an.fit_growth_exponent(_field(lambda r: r - 1.0), (0.25, 2.5))
    with pytest.raises(an.DegenerateWindow):
        an.gradient_blowup_check(_field(lambda r: np.ones_like(r)), (0.25, 2.5))


def test_frame_consistency():
    g = sv.AnnulusGrid.for_index(3, 32, 16)
    vals = np.random.default_rng(1).uniform(1, 2, g.shape)
    f = sv.Field(g, vals, 0.7)
    traj = cv.log_drift(0.3, 2.0, 2, xi0=[0.1, -0.2])
    xi = traj.position(0.7)
    R, TH = np.meshgrid(g.r, g.theta, indexing="ij")
    pts = np.stack([xi[0] + R * np.cos(TH), xi[1] + R * np.sin(TH)], axis=-1)
    rec = an.reconstruct_u(f, traj, pts)
    assert np.array_equal(rec.values, vals)


def test_stationary_reconstruction_is_identity():
    f = _field(lambda r: r ** 0.5, n_r=64, n_theta=16)
    rec = an.reconstruct_u(f, cv.stationary(2), half_width=2.0, n=41)
    r = np.linalg.norm(rec.points, axis=-1)
    ok = ~np.isnan(rec.values)
    assert np.all(np.isnan(rec.values[r < 0.25 - 1e-12]))
    assert np.allclose(rec.values[ok], r[ok] ** 0.5, rtol=2e-3)


def test_argmin_follows_curve():
    traj = cv.log_drift(0.5, 2.0, 2)
    runs = [_field(lambda r: r ** 0.5, n_r=64, n_theta=32, t=t) for t in (0.0, 0.5, 1.0)]
    res = an.track_singularity(runs, traj, half_width=1.0, n=101)
    assert res.passed, res.to_dict()
    a = an.reconstruct_u(runs[0], traj, n=101).hole_centre()
    b = an.reconstruct_u(runs[2], traj, n=101).hole_centre()
    shift = traj.position(1.0)[:2] - traj.position(0.0)[:2]
    assert np.linalg.norm((b - a) - shift) <= 2 * res.cell


def test_minimum_away_from_singularity_is_not_tracked():
    # a field decreasing in r has its minimum far from xi(t)
    traj = cv.log_drift(0.5, 2.0, 2)
    f = _field(lambda r: 1.0 / r, n_r=64, n_theta=32, t=1.0)
    res = an.track_singularity([f], traj, half_width=1.0, n=101)
    assert not res.passed
    assert max(res.hole_offsets) <= 2 * res.cell


def test_initial_continuity():
    v0 = lambda r: r ** 0.6
    runs = [_field(lambda r, t=t: r ** 0.6 * (1 + t), t=t) for t in (0.0, 1e-3, 1e-2, 1e-1)]
    res = an.initial_continuity_check(runs, v0)
    assert res.passed and res.decreasing_towards_zero
    assert res.deviations[0] == 0.0
    late = an.initial_continuity_check(runs[1:], v0)
    assert not late.passed


def test_energy_constant_is_zero():
    assert an.energy(_field(lambda r: np.full_like(r, 2.0), n_theta=8)) == 0.0


@pytest.mark.parametrize("n, p", [(2, 4.0), (3, 5.0), (2, 3.0)])
def test_energy_closed_form(n, p):
    crit = (p - n) / (p - 1)
    cfg = ExponentConfig(n, p, 0.6 * crit, 0.5 * (crit + 1), 2.0, 1.0)
    prm = derive_structural(cfg, sigma=0.1, K=1.1 * min_K(cfg), c_xi=0.5, A=4.0)
    t = 0.25
    amp = prm.K * (1 + prm.A * t) ** (prm.theta * (cfg.lam_prime - cfg.lam))
    a, b = 0.25, 1.0
    q = p * (cfg.lam - 1) + n
    integral = np.log(b / a) if q == 0 else (b ** q - a ** q) / q
    exact = sv.sphere_area(n) * (amp * cfg.lam) ** p * integral
    errs = []
    for n_r in (256, 1024):
        g = sv.AnnulusGrid(a, b, n_r)
        f = sv.Field(g, br.super_inner(prm, g.r, t).value, t, n=n, p=p)
        errs.append(abs(an.energy(f) / exact - 1))
    assert errs[1] <= 1e-5 and errs[1] < errs[0] / 8


def test_energy_log_case_reference(prm):
    # for the reference exponents p (lambda - 1) + n = 0: the integral is logarithmic
    c = prm.cfg
    assert c.p * (c.lam - 1) + c.n == 0
    t = 0.5
    amp = prm.K * (1 + prm.A * t) ** (prm.theta * (c.lam_prime - c.lam))
    g = sv.AnnulusGrid(0.25, 2.0, 1024, 16)
    f = sv.Field(g, br.super_inner(prm, g.radii(), t).value, t, n=2, p=4.0)
    exact = 2 * np.pi * (amp * c.lam) ** 4 * np.log(8.0)
    assert an.energy(f) == pytest.approx(exact, rel=1e-5)


def test_energy_decreases_with_frozen_boundary(cfg, prm):
    v0 = lambda r: 0.5 * (br.lower_envelope(cfg, r) + br.upper_envelope(cfg, r))
    run = sv.solve_on_annulus(3, 0.3, "sub", v0, sv.StepperOptions(dt=0.01), prm, None,
                              n_r=256, frozen_boundary=True)
    e = np.array([en for _, en in an.energy_series(run)])
    assert np.all(np.diff(e) <= 1e-8 * e[:-1])


def test_sandwich_check(prm):
    run = [_field(lambda r: sv.barrier_values(prm, "sub", r, 0.2), t=0.2, mode="sub")]
    ok = an.sandwich_check(run, prm)
    assert ok.passed and ok.violation == pytest.approx(0.0, abs=1e-15)
    low = [_field(lambda r: 0.5 * sv.barrier_values(prm, "sub", r, 0.2), t=0.2, mode="sub")]
    assert an.sandwich_check(low, prm, rel_tol=1e-6).violation > 0
