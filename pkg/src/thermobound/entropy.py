"""Intrinsic, exchange and system entropy rates of diffusion processes.

Two pictures are supported. In the *forward* picture samples come from the
forward marginal p_t and the drift is the process drift f. In the
*controlled-forward* picture samples come from reverse-SDE trajectories run
on the clock tau = 1 - t, and the drift is g^2 s_theta.

Rates are in nats per unit time. Every estimator returns ``(value, stderr)``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .data import DatasetSpec
from .process import DiffusionProcess
from .quadrature import TimeGrid, mean_and_stderr, trapezoid
from .sampler import controlled_forward_ensemble
from .scorefield import ScoreField, hutchinson_divergence

FORWARD = "forward"
CONTROLLED = "controlled-forward"
NORM = "norm-based"
DIVERGENCE = "divergence-based"


class EntropyError(ValueError):
    pass


def _check_batch(batch) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[0] == 0:
        raise EntropyError("empty batch")
    return batch


def _sq(v):
    return np.sum(v * v, axis=1)


def _intrinsic_samples(proc, field, t, x, picture, s=None):
    g2 = float(proc.g_squared(t))
    s = field.evaluate(x, t) if s is None else s
    if picture == FORWARD:
        return _sq(2.0 * proc.drift(x, t) - g2 * s) / (2.0 * g2)
    if picture == CONTROLLED:
        return 0.5 * g2 * _sq(s)
    raise EntropyError(f"unknown picture {picture!r}")


def _exchange_samples(proc, field, t, x, picture, plug_in, rng, s=None):
    g2 = float(proc.g_squared(t))
    if picture == FORWARD:
        f = proc.drift(x, t)
        base = -2.0 * _sq(f) / g2
        if plug_in == DIVERGENCE:
            return base - proc.drift_divergence(t)
        s = field.evaluate(x, t) if s is None else s
        return base + np.sum(f * s, axis=1)
    if picture != CONTROLLED:
        raise EntropyError(f"unknown picture {picture!r}")
    if plug_in == DIVERGENCE:
        return g2 * field.divergence(x, t, rng)
    if plug_in == NORM:
        s = field.evaluate(x, t) if s is None else s
        return -g2 * _sq(s)
    raise EntropyError("controlled-forward exchange rate needs plug_in 'norm-based' or 'divergence-based'")


def intrinsic_rate(proc: DiffusionProcess, field: ScoreField, t: float, batch, picture: str = FORWARD):
    """Forward: E|2f - g^2 s|^2 / (2 g^2). Controlled-forward: (g^2/2) E|s|^2."""
    x = _check_batch(batch)
    return mean_and_stderr(_intrinsic_samples(proc, field, t, x, picture))


def exchange_rate(proc: DiffusionProcess, field: ScoreField, t: float, batch, plug_in: str | None = None,
                  picture: str = FORWARD, rng: np.random.Generator | None = None):
    """Forward: -(2/g^2) E|f|^2 + E[f . s]. Controlled-forward: g^2 E[div s]
    (divergence-based) or -g^2 E|s|^2 (norm-based, Stein-substituted)."""
    x = _check_batch(batch)
    if picture == FORWARD and plug_in is None:
        plug_in = NORM
    return mean_and_stderr(_exchange_samples(proc, field, t, x, picture, plug_in, rng))


def system_rate(proc: DiffusionProcess, field: ScoreField, t: float, batch):
    """E[div f] + (g^2/2) E|s|^2, the rate entering the likelihood bound."""
    x = _check_batch(batch)
    g2 = float(proc.g_squared(t))
    return mean_and_stderr(proc.drift_divergence(t) + 0.5 * g2 * _sq(field.evaluate(x, t)))


def drift_divergence_hutchinson(proc: DiffusionProcess, x, t: float, probes: int = 8,
                                rng: np.random.Generator | None = None):
    """Generic probe estimate of div f, a cross-check on the closed form."""
    x = _check_batch(x)
    est, _ = hutchinson_divergence(lambda y: proc.drift(y, t), x, probes, rng)
    return mean_and_stderr(est)


@dataclass
class EntropyRateSeries:
    times: np.ndarray
    intrinsic: np.ndarray
    exchange: np.ndarray
    system: np.ndarray
    stderr_intrinsic: np.ndarray
    stderr_exchange: np.ndarray
    stderr_system: np.ndarray
    picture: str
    plug_in: str
    meta: dict = field(default_factory=dict)
    # per-node mean and paired stderr of Se + 2 Si (= S + Si) on shared samples
    ratio_residual: np.ndarray | None = None
    stderr_ratio_residual: np.ndarray | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["t", "Si", "Si_err", "Se", "Se_err", "S", "S_err", "picture", "plug_in"])
        for row in zip(self.times, self.intrinsic, self.stderr_intrinsic, self.exchange,
                       self.stderr_exchange, self.system, self.stderr_system):
            w.writerow([repr(float(v)) for v in row] + [self.picture, self.plug_in])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EntropyRateSeries":
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows:
            raise EntropyError("empty series")
        col = lambda k: np.array([float(r[k]) for r in rows])  # noqa: E731
        return cls(col("t"), col("Si"), col("Se"), col("S"), col("Si_err"), col("Se_err"), col("S_err"),
                   rows[0]["picture"], rows[0]["plug_in"])


def _series_from_batches(proc, field, times, batches, picture, plug_in, seed):
    m = len(times)
    vals = np.zeros((4, m))
    errs = np.zeros((4, m))
    for k, (t, x) in enumerate(zip(times, batches)):
        x = _check_batch(x)
        s = field.evaluate(x, t)
        rng = np.random.default_rng([seed, k, 0xD1F])
        si = _intrinsic_samples(proc, field, t, x, picture, s)
        se = _exchange_samples(proc, field, t, x, picture, plug_in, rng, s)
        for row, samples in enumerate((si, se, si + se, se + 2.0 * si)):
            vals[row, k], errs[row, k] = mean_and_stderr(samples)
    return vals, errs


def forward_series(proc: DiffusionProcess, field: ScoreField, data: DatasetSpec, grid: TimeGrid | None = None,
                   batch: int = 4096, seed: int = 0, plug_in: str = NORM) -> EntropyRateSeries:
    """Rates along the forward process with fresh analytic-marginal draws at each node."""
    grid = grid or TimeGrid()
    times = grid.nodes
    batches = (data.sample_marginal(proc, float(t), batch, np.random.default_rng([seed, k]))
               for k, t in enumerate(times))
    vals, errs = _series_from_batches(proc, field, times, batches, FORWARD, plug_in, seed)
    return EntropyRateSeries(times, *vals[:3], *errs[:3], picture=FORWARD, plug_in=plug_in,
                             ratio_residual=vals[3], stderr_ratio_residual=errs[3])


def reverse_schedule(grid: TimeGrid, substeps: int) -> tuple[np.ndarray, np.ndarray]:
    """Decreasing integration times containing every grid node, and the node positions."""
    nodes = grid.nodes[::-1]
    pieces = [nodes[:1]]
    for a, b in zip(nodes[:-1], nodes[1:]):
        pieces.append(np.linspace(a, b, substeps + 1)[1:])
    times = np.concatenate(pieces)
    return times, np.arange(0, len(times), substeps)


def controlled_series(proc: DiffusionProcess, field: ScoreField, grid: TimeGrid | None = None, batch: int = 4096,
                      seed: int = 0, plug_in: str = DIVERGENCE, substeps: int = 32,
                      start_data: DatasetSpec | None = None) -> EntropyRateSeries:
    """Rates along controlled-forward trajectories, reported on the tau clock.

    Trajectories start from the prior unless ``start_data`` is given, in
    which case they start from that data's forward marginal at t_max.
    """
    grid = grid or TimeGrid()
    times, record = reverse_schedule(grid, substeps)
    x_init = None
    if start_data is not None:
        x_init = start_data.sample_marginal(proc, grid.t_max, batch, np.random.default_rng([seed, 0x57A7]))
    ens = controlled_forward_ensemble(proc, field, batch, len(times) - 1, seed, times=times, record=record,
                                      x_init=x_init)
    t_nodes = 1.0 - ens.tau
    batches = (ens.states[:, k, :] for k in range(len(t_nodes)))
    vals, errs = _series_from_batches(proc, field, t_nodes, batches, CONTROLLED, plug_in, seed)
    return EntropyRateSeries(ens.tau, *vals[:3], *errs[:3], picture=CONTROLLED, plug_in=plug_in,
                             meta={"substeps": substeps, "start": "prior" if start_data is None else "terminal"},
                             ratio_residual=vals[3], stderr_ratio_residual=errs[3])


@dataclass
class DemonLedger:
    series: EntropyRateSeries
    total_intrinsic: tuple[float, float]
    total_exchange: tuple[float, float]
    total_system: tuple[float, float]

    @property
    def entropy_removed(self) -> tuple[float, float]:
        """Entropy taken out of the system by the score network, -int S dot."""
        return -self.total_system[0], self.total_system[1]

    def totals(self) -> dict:
        return {
            "intrinsic": self.total_intrinsic,
            "exchange": self.total_exchange,
            "system": self.total_system,
            "removed_by_demon": self.entropy_removed,
        }


def integrate_series(series: EntropyRateSeries):
    tau = series.times
    grid_w = np.zeros_like(tau)
    dt = np.diff(tau)
    grid_w[:-1] += 0.5 * dt
    grid_w[1:] += 0.5 * dt
    return tuple(
        trapezoid(grid_w, v, e)
        for v, e in ((series.intrinsic, series.stderr_intrinsic), (series.exchange, series.stderr_exchange),
                     (series.system, series.stderr_system))
    )


def demon_ledger(proc: DiffusionProcess, field: ScoreField, grid: TimeGrid | None = None, batch: int = 4096,
                 seed: int = 0, plug_in: str = DIVERGENCE, substeps: int = 32,
                 start_data: DatasetSpec | None = None) -> DemonLedger:
    series = controlled_series(proc, field, grid, batch, seed, plug_in, substeps, start_data)
    si, se, s = integrate_series(series)
    return DemonLedger(series, si, se, s)


def combined_stderr(*errs: float) -> float:
    return math.sqrt(sum(e * e for e in errs))
