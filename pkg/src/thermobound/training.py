"""Unweighted denoising score matching for the trainable score fields.

Every step draws its minibatch from ``default_rng([seed, step])``, so a run
is a pure function of its config and resuming from a checkpoint at step k
continues exactly as an unbroken run would.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import DatasetSpec
from .process import DiffusionProcess
from .quadrature import T_MAX, T_MIN
from .scorefield import FeedForwardScore, LinearScore, ScoreField, TrainableField

log = logging.getLogger(__name__)

LINEAR = "Linear"
FEEDFORWARD = "FeedForward"
SGD = "sgd"
ADAM = "adam"
_EVAL_STREAM = 0x3E7A1


class TrainingError(ValueError):
    pass


class TrainingDivergence(RuntimeError):
    def __init__(self, step: int, last_finite_step: int | None):
        super().__init__(f"non-finite loss at step {step} (last finite step: {last_finite_step})")
        self.step = step
        self.last_finite_step = last_finite_step


@dataclass(frozen=True)
class TrainConfig:
    model: str = LINEAR
    hidden_sizes: tuple = (64, 64)
    steps: int = 2000
    batch: int = 256
    learning_rate: float = 1e-2
    seed: int = 0
    time_embedding_size: int = 16
    skip: bool = True
    optimizer: str = SGD
    lr_schedule: str = "constant"
    knots: int = 32
    log_every: int = 10
    snapshot_every: int = 0
    t_min: float = T_MIN
    t_max: float = T_MAX

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.model not in (LINEAR, FEEDFORWARD):
            raise TrainingError(f"unknown model {self.model!r}")
        if any(h <= 0 for h in self.hidden_sizes):
            raise TrainingError("hidden sizes must be positive")
        if self.steps < 0:
            raise TrainingError("steps must be non-negative")
        if self.batch < 2:
            raise TrainingError("batch must be at least 2")
        if not self.learning_rate > 0:
            raise TrainingError("learning_rate must be positive")
        if self.optimizer not in (SGD, ADAM):
            raise TrainingError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise TrainingError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.time_embedding_size <= 0 or self.knots < 2 or self.log_every < 1 or self.snapshot_every < 0:
            raise TrainingError("invalid time_embedding_size / knots / log_every / snapshot_every")
        if not 0.0 < self.t_min < self.t_max <= 1.0:
            raise TrainingError("need 0 < t_min < t_max <= 1")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hidden_sizes"] = list(self.hidden_sizes)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(raw) - known
        if extra:
            raise TrainingError(f"unknown train keys: {sorted(extra)}")
        return cls(**raw)


@dataclass
class TrainReport:
    loss_curve: list  # (step, batch loss) pairs
    final_loss: float
    initial_loss: float
    wall_time: float
    steps_run: int
    snapshots: list = field(default_factory=list)  # (step, [weights]) pairs

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["step", "loss"])
        for step, loss in self.loss_curve:
            w.writerow([int(step), repr(float(loss))])
        return buf.getvalue()


def init_field(config: TrainConfig, proc: DiffusionProcess) -> TrainableField:
    if config.model == LINEAR:
        return LinearScore(proc, knots=config.knots)
    return FeedForwardScore(proc, config.hidden_sizes, config.time_embedding_size, seed=config.seed,
                            skip=config.skip)


def _conditional(proc, x0, t, noise):
    scale, var = proc.marginal_coefficients(t)
    std = np.sqrt(var)
    xt = scale[:, None] * x0 + std[:, None] * noise
    return xt, -noise / std[:, None]


def evaluate_rows(field: ScoreField, x: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Scores where row i is evaluated at its own time t[i]."""
    if isinstance(field, TrainableField):
        return field.forward(x, t)[0]
    out = np.empty_like(x)
    for tv in np.unique(t):
        rows = t == tv
        out[rows] = field.evaluate(x[rows], float(tv))
    return out


def _check_inputs(field, x0, t, noise):
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if x0.ndim != 2 or x0.shape != noise.shape or t.shape != (x0.shape[0],) or x0.shape[1] != field.dim:
        raise TrainingError(f"shape mismatch: x0 {x0.shape}, t {t.shape}, noise {noise.shape}, d={field.dim}")
    return x0, t, noise


def dsm_loss(field: ScoreField, batch_x0, batch_t, noise, proc: DiffusionProcess) -> float:
    """Batch mean of |s(x_t, t) - grad log p(x_t | x_0)|^2."""
    x0, t, noise = _check_inputs(field, batch_x0, batch_t, noise)
    xt, target = _conditional(proc, x0, t, noise)
    resid = evaluate_rows(field, xt, t) - target
    loss = float(np.mean(np.sum(resid * resid, axis=1)))
    if not math.isfinite(loss):
        raise TrainingError("non-finite DSM loss")
    return loss


def dsm_loss_and_grad(field: TrainableField, batch_x0, batch_t, noise, proc: DiffusionProcess):
    x0, t, noise = _check_inputs(field, batch_x0, batch_t, noise)
    xt, target = _conditional(proc, x0, t, noise)
    out, cache = field.forward(xt, t)
    resid = out - target
    loss = float(np.mean(np.sum(resid * resid, axis=1)))
    grads = field.backward(cache, 2.0 * resid / x0.shape[0])
    return loss, grads


def draw_batch(data: DatasetSpec, config: TrainConfig, step: int):
    rng = np.random.default_rng([config.seed, step])
    x0 = data.sample(config.batch, rng)
    t = rng.uniform(config.t_min, config.t_max, size=config.batch)
    noise = rng.standard_normal(x0.shape)
    return x0, t, noise


def eval_batch(data: DatasetSpec, config: TrainConfig, n: int = 4096):
    rng = np.random.default_rng([config.seed, _EVAL_STREAM])
    x0 = data.sample(n, rng)
    return x0, rng.uniform(config.t_min, config.t_max, size=n), rng.standard_normal(x0.shape)


class _Optimizer:
    def __init__(self, kind: str, lr: float, params: list[np.ndarray], state: list[np.ndarray] | None = None):
        self.kind, self.lr = kind, lr
        n = len(params)
        if kind == ADAM:
            if state:
                if len(state) != 2 * n:
                    raise TrainingError("optimizer state does not match the model")
                self.m = [np.array(s) for s in state[:n]]
                self.v = [np.array(s) for s in state[n:]]
            else:
                self.m = [np.zeros_like(p) for p in params]
                self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads, k: int, scale: float = 1.0):
        lr = self.lr * scale
        if self.kind == SGD:
            for p, g in zip(params, grads):
                p -= lr * g
            return
        b1, b2, eps = 0.9, 0.999, 1e-8
        c1, c2 = 1.0 - b1 ** (k + 1), 1.0 - b2 ** (k + 1)
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)

    def state(self) -> list[np.ndarray]:
        return [] if self.kind == SGD else [*self.m, *self.v]


def _lr_scale(config: TrainConfig, k: int) -> float:
    if config.lr_schedule == "cosine":
        return 0.5 * (1.0 + math.cos(math.pi * k / config.steps))
    return 1.0


def train(config: TrainConfig, data: DatasetSpec, proc: DiffusionProcess, field: TrainableField | None = None,
          start_step: int = 0, optimizer_state=None, return_state: bool = False):
    """Fit a trainable field by DSM.

    Pass ``field``, ``start_step`` and ``optimizer_state`` (as loaded from a
    checkpoint) to resume; ``config.steps`` is always the total step count.
    Returns ``(field, report)``, plus the optimizer state if ``return_state``.
    """
    if proc.dim != data.d:
        raise TrainingError(f"process dim {proc.dim} != data dim {data.d}")
    data.check_process(proc)
    field = init_field(config, proc) if field is None else field
    if not 0 <= start_step <= config.steps:
        raise TrainingError(f"cannot resume at step {start_step} of {config.steps}")
    opt = _Optimizer(config.optimizer, config.learning_rate, field.params(), optimizer_state)
    ev = eval_batch(data, config)
    initial = dsm_loss(field, *ev, proc)
    clock = time.perf_counter()
    curve, snaps = [], []
    last_finite = None
    if config.steps == 0:
        curve.append((0, initial))
    for k in range(start_step, config.steps):
        loss, grads = dsm_loss_and_grad(field, *draw_batch(data, config, k), proc)
        if not (math.isfinite(loss) and all(np.all(np.isfinite(g)) for g in grads)):
            log.error("training diverged at step %d", k)
            raise TrainingDivergence(k, last_finite)
        last_finite = k
        if k % config.log_every == 0 or k == config.steps - 1:
            curve.append((k, loss))
        opt.step(field.params(), grads, k, _lr_scale(config, k))
        if config.snapshot_every and (k + 1) % config.snapshot_every == 0:
            snaps.append((k + 1, [p.copy() for p in field.params()]))
    if not curve:
        curve.append((config.steps, initial))
    final = dsm_loss(field, *ev, proc)
    report = TrainReport(curve, final, initial, time.perf_counter() - clock, config.steps - start_step, snaps)
    log.info("trained %s for %d steps: eval loss %.6g -> %.6g", config.model, report.steps_run, initial, final)
    if return_state:
        return field, report, opt.state()
    return field, report


def gradient_check(field: TrainableField, batch_x0, batch_t, noise, proc: DiffusionProcess, probes: int = 10,
                   seed: int = 0, rel_step: float = 1e-6) -> float:
    """Largest relative error between analytic and central-difference gradients
    over ``probes`` randomly chosen scalar weights."""
    _, grads = dsm_loss_and_grad(field, batch_x0, batch_t, noise, proc)
    params = field.params()
    sizes = np.array([p.size for p in params])
    rng = np.random.default_rng(seed)
    flat_grad = np.concatenate([g.ravel() for g in grads])
    # prefer weights that actually receive gradient
    live = np.flatnonzero(np.abs(flat_grad) > 1e-12 * max(np.abs(flat_grad).max(), 1e-300))
    picks = rng.choice(live, size=min(probes, live.size), replace=False)
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat in picks:
        j = int(np.searchsorted(bounds, flat, side="right") - 1)
        arr = params[j].reshape(-1)
        i = int(flat - bounds[j])
        orig = arr[i]
        h = rel_step * max(1.0, abs(orig))
        arr[i] = orig + h
        up = dsm_loss(field, batch_x0, batch_t, noise, proc)
        arr[i] = orig - h
        down = dsm_loss(field, batch_x0, batch_t, noise, proc)
        arr[i] = orig
        numeric = (up - down) / (2.0 * h)
        analytic = flat_grad[flat]
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-300))
    return worst
