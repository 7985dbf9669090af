"""Score fields: exact analytic scores, trainable models, and perturbed wrappers.

Every field maps a batch ``x`` of shape ``(n, d)`` at a scalar time ``t`` to
scores of the same shape. ``divergence`` returns one value per row.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import kernels
from .data import DatasetSpec, UNIFORM_UNIT
from .process import VE, DiffusionProcess

log = logging.getLogger(__name__)

ADDITIVE = "additive-noise-field"
SCALAR = "scalar-miscalibration"


class ScoreFieldError(ValueError):
    pass


def _as_batch(x, dim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise ScoreFieldError(f"expected states with {dim} coordinates, got shape {x.shape}")
    return x, single


def hutchinson_divergence(fn, x: np.ndarray, probes: int = 8, rng: np.random.Generator | None = None,
                          rel_step: float = 1e-4) -> tuple[np.ndarray, np.ndarray]:
    """Per-row divergence of ``fn`` by Rademacher probes and central differences.

    Returns ``(estimate, stderr)``, both of shape ``(n,)``; the stderr is the
    spread across probes.
    """
    if probes < 1:
        raise ScoreFieldError("need at least one probe")
    rng = np.random.default_rng(0) if rng is None else rng
    n, d = x.shape
    h = rel_step * np.maximum(1.0, np.sqrt(np.mean(x * x, axis=1)))[:, None]
    samples = np.empty((probes, n))
    for k in range(probes):
        v = rng.integers(0, 2, size=(n, d)).astype(np.float64) * 2.0 - 1.0
        jvp = (fn(x + h * v) - fn(x - h * v)) / (2.0 * h)
        samples[k] = np.sum(v * jvp, axis=1)
    est = samples.mean(axis=0)
    if probes > 1:
        err = samples.std(axis=0, ddof=1) / math.sqrt(probes)
    else:
        err = np.zeros(n)
    return est, err


class ScoreField:
    """Base class. Subclasses implement ``_evaluate`` and optionally ``_divergence``."""

    variant = "abstract"
    exact_divergence = False
    hutchinson_probes = 8
    fd_step = 1e-4

    def __init__(self, proc: DiffusionProcess):
        self.proc = proc

    @property
    def dim(self) -> int:
        return self.proc.dim

    def evaluate(self, x, t: float) -> np.ndarray:
        xb, single = _as_batch(x, self.dim)
        out = self._evaluate(xb, float(t))
        return out[0] if single else out

    def divergence(self, x, t: float, rng: np.random.Generator | None = None) -> np.ndarray:
        xb, single = _as_batch(x, self.dim)
        out = self._divergence(xb, float(t), rng)
        return out[0] if single else out

    def _evaluate(self, x, t):
        raise NotImplementedError

    def _divergence(self, x, t, rng):
        est, _ = hutchinson_divergence(lambda y: self._evaluate(y, t), x, self.hutchinson_probes, rng, self.fd_step)
        return est


# ---------------------------------------------------------------------------
# exact scores


def gaussian_score(x, t: float, mu, sigma_mat, proc: DiffusionProcess) -> np.ndarray:
    """Score of the noised Gaussian marginal: -(a^2 Sigma + v I)^{-1} (x - a mu)."""
    return ExactGaussian(proc, mu, sigma_mat).evaluate(x, t)


def uniform_score(x, t: float, proc: DiffusionProcess, floor: float = 1e-300) -> np.ndarray:
    """Coordinate-wise score of Uniform[0,1]^d under VE noise."""
    return ExactUniform(proc, floor).evaluate(x, t)


class ExactGaussian(ScoreField):
    """True score for N(mu, Sigma) data.

    Under VE the marginal is N(mu, Sigma + v(t) I); under VP it is
    N(a mu, a^2 Sigma + (1 - a^2) I) with a the mean scale.
    """

    variant = "ExactGaussian"
    exact_divergence = True

    def __init__(self, proc: DiffusionProcess, mu=None, sigma_mat=None):
        super().__init__(proc)
        d = proc.dim
        self.mu = np.zeros(d) if mu is None else np.asarray(mu, dtype=np.float64).reshape(-1)
        cov = np.eye(d) if sigma_mat is None else np.asarray(sigma_mat, dtype=np.float64)
        if cov.ndim == 1:
            cov = np.diag(cov)
        if self.mu.shape != (d,) or cov.shape != (d, d):
            raise ScoreFieldError("mu/sigma_mat do not match process dimension")
        if not np.allclose(cov, cov.T):
            raise ScoreFieldError("sigma_mat is not symmetric")
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ScoreFieldError("sigma_mat is not positive definite") from exc
        self.cov = cov
        self._cache: dict[float, tuple[np.ndarray, np.ndarray]] = {}

    @classmethod
    def for_data(cls, data: DatasetSpec, proc: DiffusionProcess) -> "ExactGaussian":
        return cls(proc, data.mu, data.cov)

    def precision(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        """(C(t)^{-1}, marginal mean) at time t."""
        hit = self._cache.get(t)
        if hit is None:
            alpha, var = self.proc.marginal(t)
            c = alpha * alpha * self.cov + var * np.eye(self.dim)
            hit = (np.linalg.inv(c), alpha * self.mu)
            if len(self._cache) > 4096:
                self._cache.clear()
            self._cache[t] = hit
        return hit

    def _evaluate(self, x, t):
        prec, mean = self.precision(t)
        return -(x - mean) @ prec.T

    def _divergence(self, x, t, rng):
        prec, _ = self.precision(t)
        return np.full(x.shape[0], -np.trace(prec))


class ExactUniform(ScoreField):
    """True score for Uniform[0,1]^d data under VE noise."""

    variant = "ExactUniform"
    exact_divergence = True

    def __init__(self, proc: DiffusionProcess, floor: float = 1e-300):
        if proc.kind != VE:
            raise ScoreFieldError("ExactUniform is defined for the VE process only")
        super().__init__(proc)
        self.floor = floor
        self.clamp_events = 0

    def _scale(self, t):
        v = float(self.proc.variance_increment(t))
        if not v > 0.0:
            raise ScoreFieldError("uniform score needs t > 0")
        return math.sqrt(v)

    def _terms(self, x, t):
        score, dscore, n = kernels.uniform_score_terms(x, self._scale(t), self.floor)
        if n:
            if not self.clamp_events:
                log.warning("uniform score denominator clamped at t=%g", t)
            self.clamp_events += n
        return score, dscore

    def _evaluate(self, x, t):
        return self._terms(x, t)[0]

    def _divergence(self, x, t, rng):
        return self._terms(x, t)[1].sum(axis=1)

    def log_density(self, x, t):
        xb, _ = _as_batch(x, self.dim)
        return kernels.uniform_log_density(xb, self._scale(t)).sum(axis=1)


def exact_field(data: DatasetSpec, proc: DiffusionProcess) -> ScoreField:
    data.check_process(proc)
    if data.kind == UNIFORM_UNIT:
        return ExactUniform(proc)
    return ExactGaussian.for_data(data, proc)


# ---------------------------------------------------------------------------
# trainable models


class TrainableField(ScoreField):
    """Fields with a flat list of weight arrays and analytic gradients."""

    def params(self) -> list[np.ndarray]:
        raise NotImplementedError

    def set_params(self, arrays: list[np.ndarray]) -> None:
        current = self.params()
        if len(arrays) != len(current):
            raise ScoreFieldError("wrong number of weight arrays")
        for dst, src in zip(current, arrays):
            src = np.asarray(src, dtype=np.float64)
            if src.shape != dst.shape:
                raise ScoreFieldError(f"weight shape {src.shape} != {dst.shape}")
            dst[...] = src

    def forward(self, x: np.ndarray, t: np.ndarray):
        """Scores for per-row times ``t``; returns ``(scores, cache)``."""
        raise NotImplementedError

    def backward(self, cache, grad_out: np.ndarray) -> list[np.ndarray]:
        """Gradients of sum(grad_out * scores) with respect to ``params()``."""
        raise NotImplementedError

    def _evaluate(self, x, t):
        return self.forward(x, np.full(x.shape[0], t))[0]


class LinearScore(TrainableField):
    """s(x, t) = W(t) x + b(t), with W, b linearly interpolated between time knots."""

    variant = "Linear"
    exact_divergence = True

    def __init__(self, proc: DiffusionProcess, knots: int = 32, weights=None, bias=None):
        super().__init__(proc)
        if knots < 2:
            raise ScoreFieldError("need at least two knots")
        d = proc.dim
        self.knots = knots
        self.weights = np.zeros((knots, d, d)) if weights is None else np.array(weights, dtype=np.float64)
        self.bias = np.zeros((knots, d)) if bias is None else np.array(bias, dtype=np.float64)
        if self.weights.shape != (knots, d, d) or self.bias.shape != (knots, d):
            raise ScoreFieldError("weight shapes do not match knots/dim")

    def params(self):
        return [self.weights, self.bias]

    def _locate(self, t):
        u = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0) * (self.knots - 1)
        idx = np.minimum(np.floor(u).astype(np.int64), self.knots - 2)
        return idx, u - idx

    def matrix(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        i, f = self._locate(t)
        i, f = int(i), float(f)
        w = (1.0 - f) * self.weights[i] + f * self.weights[i + 1]
        b = (1.0 - f) * self.bias[i] + f * self.bias[i + 1]
        return w, b

    def _evaluate(self, x, t):
        w, b = self.matrix(t)
        return x @ w.T + b

    def _divergence(self, x, t, rng):
        return np.full(x.shape[0], np.trace(self.matrix(t)[0]))

    def forward(self, x, t):
        idx, f = self._locate(t)
        lo, hi = 1.0 - f, f
        w = lo[:, None, None] * self.weights[idx] + hi[:, None, None] * self.weights[idx + 1]
        b = lo[:, None] * self.bias[idx] + hi[:, None] * self.bias[idx + 1]
        out = np.einsum("nij,nj->ni", w, x) + b
        return out, (x, idx, lo, hi)

    def backward(self, cache, grad_out):
        x, idx, lo, hi = cache
        outer = grad_out[:, :, None] * x[:, None, :]
        gw = np.zeros_like(self.weights)
        gb = np.zeros_like(self.bias)
        np.add.at(gw, idx, lo[:, None, None] * outer)
        np.add.at(gw, idx + 1, hi[:, None, None] * outer)
        np.add.at(gb, idx, lo[:, None] * grad_out)
        np.add.at(gb, idx + 1, hi[:, None] * grad_out)
        return [gw, gb]


def _silu(z):
    return z * expit(z)


def _silu_grad(z):
    sig = expit(z)
    return sig * (1.0 + z * (1.0 - sig))


class FeedForwardScore(TrainableField):
    """MLP on [x / scale(t), sinusoidal(t)] with output divided by the noise std.

    ``scale(t)`` is the marginal std a unit-variance datum would have, so the
    network sees O(1) inputs at every time. With ``skip`` a fixed term
    -x / scale(t)^2, the exact score for standard normal data, carries the
    bulk of the field and the network learns the correction. Without it the
    unweighted loss leaves large-t errors, which g^2 amplifies, almost
    untrained.
    """

    variant = "FeedForward"
    # trace of the Jacobian by forward-mode tangents, d passes of width h
    exact_divergence = True

    def __init__(self, proc: DiffusionProcess, hidden_sizes=(64, 64), time_embedding_size: int = 16,
                 seed: int = 0, params: list[np.ndarray] | None = None, skip: bool = True):
        super().__init__(proc)
        self.skip = bool(skip)
        if time_embedding_size < 2 or time_embedding_size % 2:
            raise ScoreFieldError("time_embedding_size must be an even integer >= 2")
        self.hidden_sizes = tuple(int(h) for h in hidden_sizes)
        self.time_embedding_size = int(time_embedding_size)
        half = self.time_embedding_size // 2
        self._freqs = 2.0 * math.pi * np.exp(np.linspace(0.0, math.log(32.0), half))
        sizes = [proc.dim + self.time_embedding_size, *self.hidden_sizes, proc.dim]
        rng = np.random.default_rng(seed)
        self._params = []
        for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = k == len(sizes) - 2
            std = (0.1 if last else 1.0) * math.sqrt(1.0 / n_in)
            self._params.append(rng.normal(0.0, std, size=(n_in, n_out)))
            self._params.append(np.zeros(n_out))
        if params is not None:
            self.set_params(params)

    def params(self):
        return self._params

    def _scales(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.proc.kind == VE:
            var = self.proc.variance_increment(t)
            alpha2 = np.ones_like(t)
        else:
            half = 0.5 * self.proc.integrated_beta(t)
            alpha2 = np.exp(-2.0 * half)
            var = -np.expm1(-2.0 * half)
        c_in = 1.0 / np.sqrt(alpha2 + var)
        c_out = 1.0 / np.sqrt(np.maximum(var, 1e-12))
        return c_in, c_out

    def embed(self, t):
        ang = np.asarray(t, dtype=np.float64)[:, None] * self._freqs[None, :]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    def forward(self, x, t):
        c_in, c_out = self._scales(t)
        h = np.concatenate([x * c_in[:, None], self.embed(t)], axis=1)
        pre = []
        acts = [h]
        n_layers = len(self._params) // 2
        for k in range(n_layers):
            w, b = self._params[2 * k], self._params[2 * k + 1]
            z = h @ w + b
            if k < n_layers - 1:
                pre.append(z)
                h = _silu(z)
                acts.append(h)
            else:
                h = z
        out = h * c_out[:, None]
        if self.skip:
            out = out - x * (c_in * c_in)[:, None]
        return out, (acts, pre, c_out)

    def _divergence(self, x, t, rng):
        tv = np.full(x.shape[0], t)
        c_in, c_out = self._scales(tv)
        _, (_, pre, _) = self.forward(x, tv)
        d = self.proc.dim
        n_layers = len(self._params) // 2
        # tangents[i, j, :] = d(hidden)/d(x_j) for sample i
        tangents = c_in[:, None, None] * self._params[0][None, :d, :]
        for k in range(n_layers - 1):
            tangents = (tangents * _silu_grad(pre[k])[:, None, :]) @ self._params[2 * k + 2]
        div = c_out * np.trace(tangents, axis1=1, axis2=2)
        return div - d * c_in * c_in if self.skip else div

    def backward(self, cache, grad_out):
        acts, pre, c_out = cache
        n_layers = len(self._params) // 2
        grads: list[np.ndarray] = [None] * len(self._params)  # type: ignore[list-item]
        delta = grad_out * c_out[:, None]
        for k in range(n_layers - 1, -1, -1):
            grads[2 * k] = acts[k].T @ delta
            grads[2 * k + 1] = delta.sum(axis=0)
            if k > 0:
                delta = (delta @ self._params[2 * k].T) * _silu_grad(pre[k - 1])
        return grads


# ---------------------------------------------------------------------------
# perturbations


@dataclass(frozen=True)
class PerturbationSpec:
    epsilon: float = 0.0
    mode: str = ADDITIVE
    seed: int = 0
    features: int = 8

    def __post_init__(self):
        if self.epsilon < 0:
            raise ScoreFieldError("epsilon must be non-negative")
        if self.mode not in (ADDITIVE, SCALAR):
            raise ScoreFieldError(f"unknown perturbation mode {self.mode!r}")


class PerturbedScore(ScoreField):
    """Base field plus a controlled error.

    In additive mode the error is eps * eta(x, t), where eta is a fixed random
    Fourier-feature field whose j-th output never depends on x_j. That makes
    eta exactly divergence-free, so the divergence of the wrapper equals that
    of the base, and by Stein's identity eta is orthogonal to the true score
    in expectation. eta is scaled so that E|eta|^2 = E|s_base|^2 at t = 0.5
    on the reference marginal of unit-variance data.
    """

    variant = "Perturbed"

    def __init__(self, base: ScoreField, spec: PerturbationSpec, reference_samples: int = 4096):
        super().__init__(base.proc)
        self.base = base
        self.spec = spec
        self.exact_divergence = base.exact_divergence
        d, m = self.dim, spec.features
        rng = np.random.default_rng([spec.seed, 0x5EED])
        omega = rng.standard_normal((d, m, d))
        for j in range(d):
            omega[j, :, j] = 0.0
        self._omega = omega
        self._time_freq = math.pi * rng.standard_normal((d, m))
        self._phase = rng.uniform(0.0, 2.0 * math.pi, size=(d, m))
        self._amp = rng.standard_normal((d, m)) / math.sqrt(m)
        self._gain = 1.0
        if spec.mode == ADDITIVE and spec.epsilon > 0:
            x_ref = self._reference_marginal(0.5, reference_samples, rng)
            target = np.mean(np.sum(base.evaluate(x_ref, 0.5) ** 2, axis=1))
            raw = np.mean(np.sum(self.noise_field(x_ref, 0.5) ** 2, axis=1))
            self._gain = math.sqrt(target / raw) if raw > 0 else 0.0

    def _unit_std(self, t):
        alpha, var = self.proc.marginal(t)
        return math.sqrt(alpha * alpha + var)

    def _reference_marginal(self, t, n, rng):
        return self._unit_std(t) * rng.standard_normal((n, self.dim))

    def noise_field(self, x, t: float) -> np.ndarray:
        x, _ = _as_batch(x, self.dim)
        scale = self._unit_std(t)
        phase = np.einsum("nd,jmd->njm", x / scale, self._omega) + (self._time_freq * t + self._phase)
        return (self._gain / scale) * np.einsum("njm,jm->nj", np.cos(phase), self._amp)

    def _evaluate(self, x, t):
        s = self.base._evaluate(x, t)
        eps = self.spec.epsilon
        if eps == 0.0:
            return s
        if self.spec.mode == SCALAR:
            return (1.0 + eps) * s
        return s + eps * self.noise_field(x, t)

    def _divergence(self, x, t, rng):
        div = self.base._divergence(x, t, rng)
        if self.spec.mode == SCALAR and self.spec.epsilon != 0.0:
            return (1.0 + self.spec.epsilon) * div
        return div


def evaluate(field: ScoreField, x, t: float) -> np.ndarray:
    return field.evaluate(x, t)


def divergence(field: ScoreField, x, t: float, rng: np.random.Generator | None = None) -> np.ndarray:
    return field.divergence(x, t, rng)
