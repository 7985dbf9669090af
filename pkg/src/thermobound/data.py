"""Synthetic data distributions with known entropy and known noised marginals."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .process import VE, DiffusionProcess

GAUSSIAN_PRODUCT = "GaussianProduct"
GAUSSIAN_FULL = "GaussianFull"
UNIFORM_UNIT = "UniformUnit"

_KINDS = (GAUSSIAN_PRODUCT, GAUSSIAN_FULL, UNIFORM_UNIT)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DatasetSpec:
    """A data distribution on R^d.

    GaussianProduct takes a vector of per-coordinate variances in ``sigma_mat``
    (or nothing, meaning unit variance); GaussianFull takes a full SPD matrix.
    """

    kind: str
    d: int
    mu: np.ndarray | None = None
    sigma_mat: np.ndarray | None = None
    _cov: np.ndarray = field(init=False, repr=False, default=None)

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise DatasetError(f"unknown dataset kind {self.kind!r}")
        if self.d < 1:
            raise DatasetError("d must be positive")
        if self.kind == UNIFORM_UNIT:
            return
        mu = np.zeros(self.d) if self.mu is None else np.asarray(self.mu, dtype=np.float64).reshape(-1)
        if mu.shape != (self.d,):
            raise DatasetError(f"mu has shape {mu.shape}, expected ({self.d},)")
        if self.kind == GAUSSIAN_PRODUCT:
            var = np.ones(self.d) if self.sigma_mat is None else np.asarray(self.sigma_mat, dtype=np.float64)
            if var.ndim == 2:
                var = np.diag(var)
            var = var.reshape(-1)
            if var.shape != (self.d,) or np.any(var <= 0):
                raise DatasetError("GaussianProduct needs d positive variances")
            cov = np.diag(var)
        else:
            if self.sigma_mat is None:
                raise DatasetError("GaussianFull needs sigma_mat")
            cov = np.asarray(self.sigma_mat, dtype=np.float64)
            if cov.shape != (self.d, self.d):
                raise DatasetError(f"sigma_mat has shape {cov.shape}, expected ({self.d}, {self.d})")
            if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
                raise DatasetError("sigma_mat is not symmetric")
            try:
                np.linalg.cholesky(cov)
            except np.linalg.LinAlgError as exc:
                raise DatasetError("sigma_mat is not positive definite") from exc
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "_cov", cov)

    @property
    def is_gaussian(self) -> bool:
        return self.kind != UNIFORM_UNIT

    @property
    def cov(self) -> np.ndarray:
        if not self.is_gaussian:
            raise DatasetError("uniform data has no covariance parameter")
        return self._cov

    def check_process(self, proc: DiffusionProcess) -> None:
        if proc.dim != self.d:
            raise DatasetError(f"process dim {proc.dim} != data dim {self.d}")
        if self.kind == UNIFORM_UNIT and proc.kind != VE:
            raise DatasetError("UniformUnit data is supported only under the VE process")

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == UNIFORM_UNIT:
            return rng.random((n, self.d))
        z = rng.standard_normal((n, self.d))
        if self.kind == GAUSSIAN_PRODUCT:
            return self.mu + z * np.sqrt(np.diag(self._cov))
        return self.mu + z @ np.linalg.cholesky(self._cov).T

    def sample_marginal(self, proc: DiffusionProcess, t: float, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw x_t = mean_scale * x_0 + sqrt(added_variance) * z with x_0 from the data."""
        self.check_process(proc)
        alpha, var = proc.marginal(t)
        x0 = self.sample(n, rng)
        return alpha * x0 + math.sqrt(var) * rng.standard_normal((n, self.d))

    def log_density(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.kind == UNIFORM_UNIT:
            inside = np.all((x >= 0.0) & (x <= 1.0), axis=-1)
            return np.where(inside, 0.0, -np.inf)
        diff = x - self.mu
        chol = np.linalg.cholesky(self._cov)
        sol = np.linalg.solve(chol, diff.reshape(-1, self.d).T).T.reshape(diff.shape)
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        return -0.5 * (self.d * math.log(2.0 * math.pi) + logdet) - 0.5 * np.sum(sol * sol, axis=-1)

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "d": self.d}
        if self.is_gaussian:
            out["mu"] = self.mu.tolist()
            if self.kind == GAUSSIAN_PRODUCT:
                out["sigma_mat"] = np.diag(self._cov).tolist()
            else:
                out["sigma_mat"] = self._cov.tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        extra = set(d) - {"kind", "d", "mu", "sigma_mat"}
        if extra:
            raise DatasetError(f"unknown data fields: {sorted(extra)}")
        if "kind" not in d or "d" not in d:
            raise DatasetError("data block needs kind and d")
        return cls(
            kind=str(d["kind"]),
            d=int(d["d"]),
            mu=None if d.get("mu") is None else np.asarray(d["mu"], dtype=np.float64),
            sigma_mat=None if d.get("sigma_mat") is None else np.asarray(d["sigma_mat"], dtype=np.float64),
        )


def standard_gaussian(d: int) -> DatasetSpec:
    return DatasetSpec(GAUSSIAN_PRODUCT, d)


def uniform_unit(d: int) -> DatasetSpec:
    return DatasetSpec(UNIFORM_UNIT, d)


def data_entropy(data: DatasetSpec) -> float:
    """Differential entropy S0 in nats."""
    if data.kind == UNIFORM_UNIT:
        return 0.0
    _, logdet = np.linalg.slogdet(data.cov)
    return 0.5 * (data.d * math.log(2.0 * math.pi * math.e) + logdet)
