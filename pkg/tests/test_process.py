import math

import numpy as np
import pytest
from scipy import integrate

from thermobound.process import PRIOR_HALF_SIGMA_SQ, DiffusionProcess, ProcessError


@pytest.mark.parametrize("sigma", [2.0, 10.0, 30.0])
@pytest.mark.parametrize("t", [0.0, 1e-4, 0.3, 1.0])
def test_ve_variance_matches_integrated_g2(sigma, t):
    proc = DiffusionProcess("VE", sigma)
    ref, _ = integrate.quad(lambda u: proc.g_squared(u), 0.0, t, epsabs=1e-13)
    assert float(proc.variance_increment(t)) == pytest.approx(ref, rel=1e-10, abs=1e-14)


def test_ve_marginal_at_t1():
    proc = DiffusionProcess("VE", 10.0)
    assert proc.marginal(1.0).added_variance == pytest.approx(99.0 / (2.0 * math.log(10.0)))


@pytest.mark.parametrize("sigma", [10.0, 25.0])
def test_vp_schedule_and_budget(sigma):
    proc = DiffusionProcess("VP", sigma, r=0.3)
    budget, _ = integrate.quad(lambda u: proc.g_squared(u), 0.0, 1.0)
    assert budget == pytest.approx(math.log1p(sigma**2), rel=1e-12)
    assert proc.beta_min == pytest.approx(0.3 * budget)
    assert proc.beta_max == pytest.approx(1.7 * budget)
    # at t = 1 the mean decays to 1/sqrt(1 + sigma^2)
    alpha, var = proc.marginal(1.0)
    assert alpha == pytest.approx(1.0 / math.sqrt(1.0 + sigma**2))
    assert alpha**2 + var == pytest.approx(1.0)
    assert proc.prior_variance() == pytest.approx(var)


def test_vp_marginal_solves_variance_ode():
    # d/dt Var = -beta Var + beta for unit-variance data stays at 1
    proc = DiffusionProcess("VP", 10.0)
    sol = integrate.solve_ivp(lambda t, y: -proc.g_squared(t) * y + proc.g_squared(t), (0, 0.7), [0.0],
                              rtol=1e-11, atol=1e-13)
    assert proc.marginal(0.7).added_variance == pytest.approx(sol.y[0, -1], rel=1e-8)


def test_marginal_coefficients_vectorized_matches_scalar():
    for kind in ("VE", "VP"):
        proc = DiffusionProcess(kind, 15.0)
        t = np.array([1e-4, 0.2, 0.5, 0.99])
        scale, var = proc.marginal_coefficients(t)
        for k, tv in enumerate(t):
            m = proc.marginal(float(tv))
            assert scale[k] == pytest.approx(m.mean_scale, rel=1e-14)
            assert var[k] == pytest.approx(m.added_variance, rel=1e-14)


def test_drift_and_divergence():
    ve, vp = DiffusionProcess("VE", 10.0, dim=3), DiffusionProcess("VP", 10.0, dim=3)
    x = np.ones((2, 3))
    assert np.all(ve.drift(x, 0.5) == 0.0) and ve.drift_divergence(0.5) == 0.0
    assert np.allclose(vp.drift(x, 0.5), -0.5 * vp.g_squared(0.5))
    assert vp.drift_divergence(0.5) == pytest.approx(-1.5 * vp.g_squared(0.5))


def test_prior_conventions():
    proc = DiffusionProcess("VE", 10.0, prior=PRIOR_HALF_SIGMA_SQ)
    assert proc.prior_variance() == pytest.approx(49.5)
    x = np.zeros((1, 1))
    assert proc.prior_log_density(x)[0] == pytest.approx(-0.5 * math.log(2 * math.pi * 49.5))


@pytest.mark.parametrize("kwargs", [
    {"kind": "XX"}, {"kind": "VE", "sigma": 1.0}, {"kind": "VP", "r": 1.0}, {"kind": "VE", "dim": 0},
    {"kind": "VE", "prior": "nope"},
])
def test_invalid_processes(kwargs):
    with pytest.raises(ProcessError):
        DiffusionProcess(**kwargs)


def test_time_outside_unit_interval():
    proc = DiffusionProcess()
    with pytest.raises(ProcessError):
        proc.marginal(1.5)
    with pytest.raises(ProcessError):
        proc.g_squared(-0.1)


def test_round_trip_dict():
    proc = DiffusionProcess("VP", 12.0, r=0.4, dim=5)
    assert DiffusionProcess.from_dict(proc.to_dict()) == proc
    with pytest.raises(ProcessError):
        DiffusionProcess.from_dict({**proc.to_dict(), "beta": 1})
