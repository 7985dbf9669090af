import math

import numpy as np
import pytest
from scipy import integrate, stats
from scipy.special import log_ndtr

from thermobound import kernels
from thermobound.data import DatasetError, DatasetSpec, data_entropy, standard_gaussian, uniform_unit
from thermobound.process import DiffusionProcess


def _log_conv_density(x, s):
    # log(Phi(x/s) - Phi((x-1)/s)), written to keep precision in both tails
    a, b = x / s, (x - 1.0) / s
    if a > 0 and b > 0:  # reflect so both arguments are negative
        a, b = -b, -a
    return log_ndtr(a) + math.log1p(-math.exp(log_ndtr(b) - log_ndtr(a)))


def _conv_density(x, s):
    # Uniform[0,1] * N(0, s^2) by direct quadrature
    return integrate.quad(lambda y: stats.norm.pdf(x - y, scale=s), 0.0, 1.0, epsabs=1e-14)[0]


@pytest.mark.parametrize("s", [0.02, 0.3, 3.0])
@pytest.mark.parametrize("x", [-0.2, 0.01, 0.5, 0.97, 1.4])
def test_uniform_score_matches_quadrature_oracle(s, x):
    h = 1e-5 * max(s, 1e-2)
    ref = (_log_conv_density(x + h, s) - _log_conv_density(x - h, s)) / (2 * h)
    score, dscore, _ = kernels.python_impl.uniform_score_terms(np.array([x]), s)
    assert score[0] == pytest.approx(ref, rel=1e-5, abs=1e-6)
    sp, _, _ = kernels.python_impl.uniform_score_terms(np.array([x + h]), s)
    sm, _, _ = kernels.python_impl.uniform_score_terms(np.array([x - h]), s)
    assert dscore[0] == pytest.approx((sp[0] - sm[0]) / (2 * h), rel=1e-4, abs=1e-4)


def test_uniform_log_density_matches_quadrature():
    for s in (0.05, 1.0):
        for x in (-0.3, 0.5, 1.2):
            got = kernels.uniform_log_density(np.array([x]), s)[0]
            assert got == pytest.approx(math.log(_conv_density(x, s)), rel=1e-9)
            assert got == pytest.approx(_log_conv_density(x, s), rel=1e-9)


def test_far_tail_score_is_finite_and_gaussian_like():
    # 40 noise stds outside the box the score tends to -(x - edge)/s^2
    s = 0.01
    x = np.array([-0.4, 1.4])
    score, _, n = kernels.python_impl.uniform_score_terms(x, s)
    assert n == 0 and np.all(np.isfinite(score))
    assert score[0] == pytest.approx(0.4 / s**2, rel=0.01)
    assert score[1] == pytest.approx(-0.4 / s**2, rel=0.01)


@pytest.mark.skipif(kernels.compiled_impl is None, reason="compiled kernels not built")
def test_compiled_kernel_agrees_with_numpy():
    x = np.random.default_rng(3).uniform(-1.0, 2.0, size=20000)
    for s in (1e-3, 0.05, 2.0):
        a = kernels.compiled_impl.uniform_score_terms(x, s)
        b = kernels.python_impl.uniform_score_terms(x, s)
        np.testing.assert_allclose(a[0], b[0], rtol=1e-10, atol=1e-10)
        np.testing.assert_allclose(a[1], b[1], rtol=1e-9, atol=1e-9)
        assert a[2] == b[2]


def test_backend_label():
    assert kernels.BACKEND in ("cython", "python")


def test_entropies():
    assert data_entropy(uniform_unit(3)) == 0.0
    assert data_entropy(standard_gaussian(2)) == pytest.approx(math.log(2 * math.pi * math.e))
    full = DatasetSpec("GaussianFull", 2, sigma_mat=np.array([[2.0, 0.5], [0.5, 1.0]]))
    assert data_entropy(full) == pytest.approx(0.5 * (2 * math.log(2 * math.pi * math.e) + math.log(1.75)))


def test_sampling_moments():
    rng = np.random.default_rng(0)
    spec = DatasetSpec("GaussianProduct", 2, mu=np.array([1.0, -1.0]), sigma_mat=np.array([4.0, 0.25]))
    x = spec.sample(200_000, rng)
    np.testing.assert_allclose(x.mean(axis=0), [1.0, -1.0], atol=0.02)
    np.testing.assert_allclose(x.var(axis=0), [4.0, 0.25], rtol=0.02)
    u = uniform_unit(1).sample(200_000, rng)
    assert u.mean() == pytest.approx(0.5, abs=0.005) and u.var() == pytest.approx(1 / 12, rel=0.02)


def test_log_density_matches_scipy():
    cov = np.array([[2.0, 0.5], [0.5, 1.0]])
    spec = DatasetSpec("GaussianFull", 2, mu=np.array([0.3, 0.1]), sigma_mat=cov)
    x = np.random.default_rng(1).normal(size=(5, 2))
    np.testing.assert_allclose(spec.log_density(x), stats.multivariate_normal([0.3, 0.1], cov).logpdf(x))


def test_invalid_specs_and_process_checks():
    with pytest.raises(DatasetError):
        DatasetSpec("GaussianFull", 2, sigma_mat=np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(DatasetError):
        DatasetSpec("Cauchy", 1)
    with pytest.raises(DatasetError):
        uniform_unit(2).check_process(DiffusionProcess("VP", 10.0, dim=2))
    with pytest.raises(DatasetError):
        standard_gaussian(2).check_process(DiffusionProcess("VE", 10.0, dim=3))


def test_dict_round_trip():
    spec = DatasetSpec("GaussianProduct", 2, mu=np.array([1.0, 2.0]), sigma_mat=np.array([3.0, 4.0]))
    back = DatasetSpec.from_dict(spec.to_dict())
    np.testing.assert_array_equal(back.cov, spec.cov)
    np.testing.assert_array_equal(back.mu, spec.mu)
