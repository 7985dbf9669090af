"""Clipped time grids and trapezoid integration with Monte-Carlo error propagation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

T_MIN = 1e-4
T_MAX = 1.0 - 1e-4

UNIFORM = "uniform"
# Nodes uniform in sqrt(t). Integrands that blow up like t^{-1/2} near the
# data end (uniform data) become smooth in this coordinate.
SQRT = "sqrt"


@dataclass(frozen=True)
class TimeGrid:
    n: int = 64
    t_min: float = T_MIN
    t_max: float = T_MAX
    spacing: str = SQRT

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("a time grid needs at least two nodes")
        if not 0.0 <= self.t_min < self.t_max <= 1.0:
            raise ValueError("need 0 <= t_min < t_max <= 1")
        if self.spacing not in (UNIFORM, SQRT):
            raise ValueError(f"unknown grid spacing {self.spacing!r}")

    @property
    def nodes(self) -> np.ndarray:
        return warp(np.linspace(0.0, 1.0, self.n), self.t_min, self.t_max, self.spacing)

    @property
    def weights(self) -> np.ndarray:
        """Trapezoid weights: sum(weights * f(nodes)) == np.trapz(f(nodes), nodes)."""
        t = self.nodes
        dt = np.diff(t)
        w = np.zeros_like(t)
        w[:-1] += 0.5 * dt
        w[1:] += 0.5 * dt
        return w

    def refined(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid((self.n - 1) * factor + 1, self.t_min, self.t_max, self.spacing)

    def to_dict(self) -> dict:
        return {"n": self.n, "t_min": self.t_min, "t_max": self.t_max, "spacing": self.spacing}


def warp(u, t_min: float, t_max: float, spacing: str) -> np.ndarray:
    """Map u in [0, 1] to times in [t_min, t_max]."""
    u = np.asarray(u, dtype=np.float64)
    if spacing == UNIFORM:
        return t_min + (t_max - t_min) * u
    lo, hi = math.sqrt(t_min), math.sqrt(t_max)
    t = (lo + (hi - lo) * u) ** 2
    # pin the endpoints exactly
    return np.where(u <= 0.0, t_min, np.where(u >= 1.0, t_max, t))


def warp_derivative(u, t_min: float, t_max: float, spacing: str) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if spacing == UNIFORM:
        return np.full_like(u, t_max - t_min)
    lo, hi = math.sqrt(t_min), math.sqrt(t_max)
    return 2.0 * (lo + (hi - lo) * u) * (hi - lo)


def trapezoid(weights: np.ndarray, values: np.ndarray, stderrs: np.ndarray | None = None) -> tuple[float, float]:
    """Weighted sum and its standard error assuming independent node errors."""
    total = float(np.dot(weights, values))
    if stderrs is None:
        return total, 0.0
    return total, float(math.sqrt(np.dot(weights**2, np.asarray(stderrs) ** 2)))


def mean_and_stderr(samples: np.ndarray) -> tuple[float, float]:
    samples = np.asarray(samples, dtype=np.float64)
    n = samples.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    mean = float(samples.mean())
    if n == 1:
        return mean, 0.0
    return mean, float(samples.std(ddof=1) / math.sqrt(n))
