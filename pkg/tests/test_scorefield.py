import numpy as np
import pytest

from thermobound.data import standard_gaussian, uniform_unit
from thermobound.process import DiffusionProcess
from thermobound.scorefield import (
    SCALAR, ExactGaussian, ExactUniform, FeedForwardScore, LinearScore, PerturbationSpec, PerturbedScore,
    ScoreFieldError, exact_field, hutchinson_divergence,
)


def fd_divergence(field, x, t, h=1e-5):
    out = np.zeros(x.shape[0])
    for j in range(x.shape[1]):
        e = np.zeros(x.shape[1])
        e[j] = h
        out += (field.evaluate(x + e, t)[:, j] - field.evaluate(x - e, t)[:, j]) / (2 * h)
    return out


def test_gaussian_score_closed_form():
    proc = DiffusionProcess("VE", 10.0, dim=2)
    cov = np.array([[2.0, 0.3], [0.3, 1.0]])
    field = ExactGaussian(proc, np.array([1.0, 0.0]), cov)
    x = np.array([[0.5, -1.0]])
    v = proc.marginal(0.4).added_variance
    expect = -np.linalg.solve(cov + v * np.eye(2), x[0] - [1.0, 0.0])
    np.testing.assert_allclose(field.evaluate(x, 0.4)[0], expect, rtol=1e-12)
    assert field.divergence(x, 0.4)[0] == pytest.approx(-np.trace(np.linalg.inv(cov + v * np.eye(2))))


def test_vp_gaussian_standard_normal_is_stationary():
    proc = DiffusionProcess("VP", 20.0, dim=3)
    x = np.random.default_rng(0).normal(size=(4, 3))
    for t in (0.01, 0.5, 0.99):
        np.testing.assert_allclose(exact_field(standard_gaussian(3), proc).evaluate(x, t), -x, atol=1e-12)


@pytest.mark.parametrize("t", [0.05, 0.5])
def test_uniform_divergence_matches_finite_difference(t):
    proc = DiffusionProcess("VE", 10.0, dim=3)
    field = ExactUniform(proc)
    x = np.random.default_rng(2).uniform(-0.5, 1.5, size=(6, 3))
    np.testing.assert_allclose(field.divergence(x, t), fd_divergence(field, x, t, 1e-6), rtol=1e-4, atol=1e-4)


def test_uniform_requires_ve():
    with pytest.raises(ScoreFieldError):
        ExactUniform(DiffusionProcess("VP", 10.0))


@pytest.mark.parametrize("kind", ["VE", "VP"])
@pytest.mark.parametrize("hidden", [(16, 16), (), (8,)])
@pytest.mark.parametrize("skip", [True, False])
def test_feedforward_exact_divergence(kind, hidden, skip):
    proc = DiffusionProcess(kind, 10.0, dim=3)
    field = FeedForwardScore(proc, hidden, seed=4, skip=skip)
    x = np.random.default_rng(5).normal(size=(7, 3)) * 2
    np.testing.assert_allclose(field.divergence(x, 0.3), fd_divergence(field, x, 0.3), rtol=1e-6, atol=1e-7)


def test_linear_divergence_is_trace():
    proc = DiffusionProcess("VE", 10.0, dim=2)
    field = LinearScore(proc, knots=4)
    field.weights[:] = np.array([[1.0, 2.0], [3.0, -4.0]])
    assert field.divergence(np.zeros((3, 2)), 0.7)[0] == pytest.approx(-3.0)


def test_linear_knot_interpolation():
    proc = DiffusionProcess("VE", 10.0, dim=1)
    field = LinearScore(proc, knots=3)
    field.weights[:, 0, 0] = [0.0, 1.0, 4.0]
    assert field.evaluate(np.ones((1, 1)), 0.25)[0, 0] == pytest.approx(0.5)
    assert field.evaluate(np.ones((1, 1)), 0.75)[0, 0] == pytest.approx(2.5)
    assert field.evaluate(np.ones((1, 1)), 1.0)[0, 0] == pytest.approx(4.0)


def test_trainable_forward_matches_evaluate_per_row():
    proc = DiffusionProcess("VE", 10.0, dim=2)
    field = FeedForwardScore(proc, (8,), seed=1)
    x = np.random.default_rng(0).normal(size=(3, 2))
    t = np.array([0.1, 0.4, 0.9])
    out, _ = field.forward(x, t)
    for i in range(3):
        np.testing.assert_allclose(out[i], field.evaluate(x[i], t[i]), rtol=1e-13)


def test_hutchinson_unbiased_for_linear_map():
    a = np.random.default_rng(1).normal(size=(4, 4))
    x = np.random.default_rng(2).normal(size=(2000, 4))
    est, err = hutchinson_divergence(lambda y: y @ a.T, x, probes=4, rng=np.random.default_rng(3))
    assert abs(est.mean() - np.trace(a)) < 4 * est.std(ddof=1) / np.sqrt(len(est))
    assert err.shape == (2000,)


def test_perturbation_is_divergence_free_and_scaled():
    proc = DiffusionProcess("VE", 10.0, dim=3)
    base = exact_field(standard_gaussian(3), proc)
    pert = PerturbedScore(base, PerturbationSpec(epsilon=0.2, seed=7))
    x = np.random.default_rng(0).normal(size=(5, 3)) * 3
    eta_div = fd_divergence(type("F", (), {"evaluate": lambda self, y, t: pert.noise_field(y, t)})(), x, 0.5)
    np.testing.assert_allclose(eta_div, 0.0, atol=1e-7)
    np.testing.assert_allclose(pert.divergence(x, 0.5), base.divergence(x, 0.5))
    xr = np.sqrt(1 + proc.marginal(0.5).added_variance) * np.random.default_rng(9).normal(size=(50_000, 3))
    ratio = np.mean(np.sum(pert.noise_field(xr, 0.5) ** 2, 1)) / np.mean(np.sum(base.evaluate(xr, 0.5) ** 2, 1))
    assert ratio == pytest.approx(1.0, rel=0.05)


def test_perturbation_zero_epsilon_is_identity_and_scalar_mode():
    proc = DiffusionProcess("VE", 10.0, dim=2)
    base = exact_field(uniform_unit(2), proc)
    x = np.random.default_rng(0).uniform(size=(4, 2))
    np.testing.assert_array_equal(PerturbedScore(base, PerturbationSpec()).evaluate(x, 0.3), base.evaluate(x, 0.3))
    sc = PerturbedScore(base, PerturbationSpec(epsilon=0.1, mode=SCALAR))
    np.testing.assert_allclose(sc.evaluate(x, 0.3), 1.1 * base.evaluate(x, 0.3))
    np.testing.assert_allclose(sc.divergence(x, 0.3), 1.1 * base.divergence(x, 0.3))


def test_bad_inputs():
    proc = DiffusionProcess("VE", 10.0, dim=2)
    with pytest.raises(ScoreFieldError):
        exact_field(standard_gaussian(2), proc).evaluate(np.zeros((3, 3)), 0.5)
    with pytest.raises(ScoreFieldError):
        PerturbationSpec(epsilon=-1.0)
    with pytest.raises(ScoreFieldError):
        LinearScore(proc, knots=1)
