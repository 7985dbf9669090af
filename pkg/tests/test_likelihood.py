import math

import numpy as np
import pytest
from scipy import integrate

from thermobound import kernels
from thermobound.data import DatasetSpec, standard_gaussian, uniform_unit
from thermobound.likelihood import (
    LikelihoodError, ODEConfig, bound_and_gap, entropy_S0, entropy_S1, integral_I_diff, integral_I_theta,
    marginal_entropy, nll_ode, to_bpd, true_score_identity,
)
from thermobound.process import DiffusionProcess
from thermobound.quadrature import TimeGrid
from thermobound.scorefield import SCALAR, LinearScore, PerturbationSpec, PerturbedScore, exact_field


def _v1(sigma):
    return integrate.quad(lambda u: sigma ** (2 * u), 0.0, 1.0, epsabs=1e-13)[0]


def test_S0_examples():
    assert entropy_S0(uniform_unit(5)) == 0.0
    assert entropy_S0(standard_gaussian(1)) == pytest.approx(1.418939, abs=1e-6)
    spec = DatasetSpec("GaussianProduct", 2, sigma_mat=np.array([1.0, 4.0]))
    assert entropy_S0(spec) == pytest.approx(3.531024, abs=1e-6)


def test_S1_examples():
    for sigma, frozen in ((10.0, 2.952909), (25.0, 3.705924)):
        oracle = 0.5 * math.log(2 * math.pi * math.e * _v1(sigma))
        assert oracle == pytest.approx(frozen, abs=1e-6)
        assert entropy_S1(DiffusionProcess("VE", sigma)) == pytest.approx(oracle, rel=1e-12)
    assert entropy_S1(DiffusionProcess("VP", 1e6)) == pytest.approx(0.5 * math.log(2 * math.pi * math.e), abs=1e-9)


def test_uniform_marginal_entropy_against_monte_carlo():
    proc = DiffusionProcess("VE", 10.0, dim=1)
    data = uniform_unit(1)
    for t in (0.05, 0.6):
        x = data.sample_marginal(proc, t, 200_000, np.random.default_rng(1))
        s = math.sqrt(proc.marginal(t).added_variance)
        samples = -kernels.uniform_log_density(x[:, 0], s)
        est, err = samples.mean(), samples.std(ddof=1) / math.sqrt(len(samples))
        assert abs(marginal_entropy(data, proc, t) - est) < 4 * err


def test_nll_exact_gaussian_is_S0():
    proc = DiffusionProcess("VE", 10.0, dim=2)
    data = standard_gaussian(2)
    res = nll_ode(exact_field(data, proc), data, proc, ODEConfig(steps=64), batch=512)
    assert abs(res.nll - 2 * 1.418939) <= 0.01
    assert res.nll_bpd == pytest.approx(res.nll / (2 * math.log(2)))


def test_nll_exact_uniform_near_zero():
    proc = DiffusionProcess("VE", 10.0, dim=4)
    data = uniform_unit(4)
    res = nll_ode(exact_field(data, proc), data, proc, ODEConfig(steps=64), batch=512)
    assert abs(res.nll) <= 0.05 * 4


def test_perturbed_nll_exceeds_exact_paired():
    proc = DiffusionProcess("VE", 10.0, dim=2)
    data = standard_gaussian(2)
    exact = exact_field(data, proc)
    ode = ODEConfig(steps=64)
    a = nll_ode(exact, data, proc, ode, batch=1024, seed=3)
    b = nll_ode(PerturbedScore(exact, PerturbationSpec(epsilon=0.2)), data, proc, ode, batch=1024, seed=3)
    diff = b.per_sample - a.per_sample
    assert diff.mean() > 3 * diff.std(ddof=1) / math.sqrt(len(diff))


def test_I_theta_gaussian_closed_form():
    proc = DiffusionProcess("VE", 10.0, dim=1)
    data = standard_gaussian(1)
    grid = TimeGrid(64)
    val, err = integral_I_theta(exact_field(data, proc), data, proc, grid, batch=4096)
    expect = 0.5 * math.log((1 + proc.marginal(grid.t_max).added_variance)
                            / (1 + proc.marginal(grid.t_min).added_variance))
    # trapezoid bias at 64 sqrt-spaced nodes is a few 1e-3 here
    assert abs(val - expect) < 4 * err + 5e-3
    assert integral_I_theta(LinearScore(proc), data, proc, grid, batch=16) == (0.0, 0.0)


def test_uniform_identity_f_zero():
    proc = DiffusionProcess("VE", 10.0, dim=1)
    lhs, err, rhs = true_score_identity(exact_field(uniform_unit(1), proc), uniform_unit(1), proc,
                                        TimeGrid(64), batch=4096)
    assert abs(lhs - rhs) < 4 * err + 0.02


def test_I_diff_identities():
    proc = DiffusionProcess("VE", 10.0, dim=1)
    data = standard_gaussian(1)
    truth = exact_field(data, proc)
    (d0, _), (p0, _) = integral_I_diff(truth, truth, data, proc, TimeGrid(16), batch=256)
    assert d0 == 0.0 and abs(p0) < 1e-12
    eps = 0.1
    miscal = PerturbedScore(truth, PerturbationSpec(epsilon=eps, mode=SCALAR))
    (direct, _), _ = integral_I_diff(miscal, truth, data, proc, TimeGrid(16), batch=256, seed=2)
    i_true, _ = integral_I_theta(truth, data, proc, TimeGrid(16), batch=256, seed=2)
    # both sides carry the same 1/2 g^2 weight, so the ratio is exactly eps^2 on shared draws
    assert direct == pytest.approx(eps**2 * i_true, rel=1e-10)


def test_truth_must_share_process():
    data = standard_gaussian(1)
    a, b = DiffusionProcess("VE", 10.0), DiffusionProcess("VE", 20.0)
    with pytest.raises(LikelihoodError):
        integral_I_diff(exact_field(data, a), exact_field(data, b), data, a, TimeGrid(4), batch=8)


def test_bound_report_exact_gaussian():
    proc = DiffusionProcess("VE", 10.0, dim=1)
    data = standard_gaussian(1)
    rep = bound_and_gap(exact_field(data, proc), data, proc, TimeGrid(64), batch=4096, ode=ODEConfig(steps=64),
                        truth=exact_field(data, proc))
    assert abs(rep.gap) < 4 * rep.gap_err + 1e-3
    assert abs(rep.bound - 1.418939) < 4 * rep.gap_err + 2e-3
    assert rep.recomputed_bound() == pytest.approx(rep.bound, rel=1e-14)
    assert rep.I_diff == 0.0 and rep.bound_holds
    assert rep.in_bpd()["bound"] == pytest.approx(to_bpd(rep.bound, 1))
    d = rep.to_dict()
    assert d["bound_holds"] is True and "bpd" in d


def test_decomposition_consistency_exact_vp():
    proc = DiffusionProcess("VP", 10.0, dim=2)
    data = standard_gaussian(2)
    truth = exact_field(data, proc)
    rep = bound_and_gap(truth, data, proc, TimeGrid(64), batch=4096, ode=ODEConfig(steps=64), truth=truth)
    combined = math.hypot(rep.nll_ode_err, rep.nll_decomposition_err)
    assert rep.consistency_residual < 4 * combined + 0.01


def test_perturbed_field_respects_bound():
    # the decomposition value is an upper-bound style quantity for imperfect
    # fields, not the ODE likelihood, so only the inequality is asserted
    proc = DiffusionProcess("VP", 10.0, dim=2)
    data = standard_gaussian(2)
    truth = exact_field(data, proc)
    field = PerturbedScore(truth, PerturbationSpec(epsilon=0.2, seed=1))
    rep = bound_and_gap(field, data, proc, TimeGrid(64), batch=4096, ode=ODEConfig(steps=64), truth=truth)
    assert rep.gap > 4 * rep.gap_err and rep.bound_holds
    assert rep.nll_decomposition > rep.bound
