"""Forward diffusion processes (VE and VP) and their marginal transitions."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

VE = "VE"
VP = "VP"

# Prior variance conventions for VE. "integrated" is v(1) = int_0^1 g^2 dt;
# "half_sigma_sq" is the (sigma^2 - 1)/2 alternative kept for comparison.
PRIOR_INTEGRATED = "integrated"
PRIOR_HALF_SIGMA_SQ = "half_sigma_sq"


class ProcessError(ValueError):
    pass


class MarginalTransition(NamedTuple):
    """Law of x_t given x_0: mean_scale * x_0 + sqrt(added_variance) * z."""

    mean_scale: float
    added_variance: float


def _check_time(t: float) -> float:
    t = float(t)
    if not (0.0 <= t <= 1.0) or math.isnan(t):
        raise ProcessError(f"time {t!r} outside [0, 1]")
    return t


@dataclass(frozen=True)
class DiffusionProcess:
    kind: str = VE
    sigma: float = 10.0
    r: float = 0.5
    dim: int = 1
    prior: str = PRIOR_INTEGRATED

    def __post_init__(self):
        if self.kind not in (VE, VP):
            raise ProcessError(f"unknown process kind {self.kind!r}")
        if self.dim < 1:
            raise ProcessError("dim must be positive")
        if self.kind == VE and not self.sigma > 1.0:
            raise ProcessError("VE requires sigma > 1")
        if self.kind == VP:
            if not self.sigma > 0.0:
                raise ProcessError("VP requires sigma > 0")
            if not 0.0 < self.r < 1.0:
                raise ProcessError("VP ratio r must lie in (0, 1)")
        if self.prior not in (PRIOR_INTEGRATED, PRIOR_HALF_SIGMA_SQ):
            raise ProcessError(f"unknown prior convention {self.prior!r}")

    # -- schedule --------------------------------------------------------

    @property
    def noise_budget(self) -> float:
        """B = log(1 + sigma^2), the integrated VP rate."""
        return math.log1p(self.sigma**2)

    @property
    def beta_min(self) -> float:
        return self.r * self.noise_budget

    @property
    def beta_max(self) -> float:
        return (2.0 - self.r) * self.noise_budget

    def g_squared(self, t):
        """Squared diffusion coefficient g(t)^2. Accepts scalars or arrays."""
        t = _validate_times(t)
        if self.kind == VE:
            return self.sigma ** (2.0 * t)
        return self.beta_min + t * (self.beta_max - self.beta_min)

    def integrated_beta(self, t):
        t = _validate_times(t)
        if self.kind != VP:
            raise ProcessError("integrated_beta is defined for VP only")
        return self.beta_min * t + 0.5 * t * t * (self.beta_max - self.beta_min)

    def variance_increment(self, t):
        """v(t) = int_0^t g(u)^2 du = (sigma^{2t} - 1) / (2 ln sigma), VE only."""
        t = _validate_times(t)
        if self.kind != VE:
            raise ProcessError("variance_increment is defined for VE only; use marginal()")
        return np.expm1(2.0 * t * math.log(self.sigma)) / (2.0 * math.log(self.sigma))

    def marginal(self, t: float) -> MarginalTransition:
        t = _check_time(t)
        if self.kind == VE:
            return MarginalTransition(1.0, float(self.variance_increment(t)))
        half = 0.5 * float(self.integrated_beta(t))
        # 1 - exp(-2h) via expm1 keeps precision near t = 0
        return MarginalTransition(math.exp(-half), -math.expm1(-2.0 * half))

    def marginal_coefficients(self, t) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized ``marginal``: (mean_scale, added_variance) arrays."""
        t = _validate_times(t)
        if self.kind == VE:
            return np.ones_like(t), np.asarray(self.variance_increment(t), dtype=np.float64)
        half = 0.5 * self.integrated_beta(t)
        return np.exp(-half), -np.expm1(-2.0 * half)

    # -- drift -----------------------------------------------------------

    def drift(self, x: np.ndarray, t: float) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise ProcessError(f"state has {x.shape[-1]} coordinates, process has dim {self.dim}")
        t = _check_time(t)
        if self.kind == VE:
            return np.zeros_like(x)
        return -0.5 * self.g_squared(t) * x

    def drift_divergence(self, t: float) -> float:
        t = _check_time(t)
        if self.kind == VE:
            return 0.0
        return -0.5 * self.dim * float(self.g_squared(t))

    # -- prior -----------------------------------------------------------

    def prior_variance(self) -> float:
        if self.kind == VP:
            return self.sigma**2 / (1.0 + self.sigma**2)
        if self.prior == PRIOR_HALF_SIGMA_SQ:
            return 0.5 * (self.sigma**2 - 1.0)
        return float(self.variance_increment(1.0))

    def prior_log_density(self, x: np.ndarray) -> np.ndarray:
        """Log-density of N(0, prior_variance * I); reduces over the last axis."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise ProcessError(f"state has {x.shape[-1]} coordinates, process has dim {self.dim}")
        var = self.prior_variance()
        sq = np.sum(x * x, axis=-1)
        return -0.5 * self.dim * math.log(2.0 * math.pi * var) - 0.5 * sq / var

    def sample_prior(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return math.sqrt(self.prior_variance()) * rng.standard_normal((n, self.dim))

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionProcess":
        known = {"kind", "sigma", "r", "dim", "prior"}
        extra = set(d) - known
        if extra:
            raise ProcessError(f"unknown process fields: {sorted(extra)}")
        kw = dict(d)
        if "kind" in kw:
            kw["kind"] = str(kw["kind"]).upper()
        if "sigma" in kw:
            kw["sigma"] = float(kw["sigma"])
        if "r" in kw:
            kw["r"] = float(kw["r"])
        if "dim" in kw:
            kw["dim"] = int(kw["dim"])
        return cls(**kw)


def _validate_times(t):
    arr = np.asarray(t, dtype=np.float64)
    if np.any(~((arr >= 0.0) & (arr <= 1.0))):
        raise ProcessError(f"time outside [0, 1]: {t!r}")
    return arr if arr.ndim else float(arr)
