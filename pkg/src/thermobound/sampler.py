"""Euler-Maruyama integration of the reverse-time SDE.

Noise for step ``k`` comes from a Philox stream keyed on ``(seed, k)``; path
``i`` always reads row ``i`` of that stream, so a path's noise depends only on
``(seed, path, step)`` and not on how many paths are integrated.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .process import DiffusionProcess
from .quadrature import T_MAX, T_MIN
from .scorefield import ScoreField

_PRIOR_STREAM = 2**63 - 1
TRAJ_MAGIC = b"THRMTRAJ"


class SamplerError(RuntimeError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


def step_noise(seed: int, step: int, n: int, d: int) -> np.ndarray:
    gen = np.random.Generator(np.random.Philox(key=np.array([seed % 2**64, step], dtype=np.uint64)))
    return gen.standard_normal((n, d))


def prior_draws(proc: DiffusionProcess, seed: int, n: int) -> np.ndarray:
    return np.sqrt(proc.prior_variance()) * step_noise(seed, _PRIOR_STREAM, n, proc.dim)


@dataclass
class TrajectoryEnsemble:
    """Recorded states of ``n`` paths. ``tau`` is the forward-running clock 1 - t."""

    tau: np.ndarray
    states: np.ndarray  # (n, len(tau), d)
    seed: int
    picture: str = "controlled-forward"

    @property
    def t(self) -> np.ndarray:
        return 1.0 - self.tau

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    def terminal(self) -> np.ndarray:
        return self.states[:, -1, :]

    def at_tau(self, tau: float, atol: float = 1e-12) -> np.ndarray:
        hit = np.flatnonzero(np.abs(self.tau - tau) <= atol)
        if hit.size == 0:
            raise KeyError(f"no recorded state at tau={tau}")
        return self.states[:, hit[0], :]

    # -- export ----------------------------------------------------------

    def to_bytes(self) -> bytes:
        n, m, d = self.states.shape
        head = TRAJ_MAGIC + struct.pack("<IQQQq", 1, n, m, d, int(self.seed))
        return head + np.ascontiguousarray(self.tau, "<f8").tobytes() + np.ascontiguousarray(self.states, "<f8").tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "TrajectoryEnsemble":
        if raw[:8] != TRAJ_MAGIC:
            raise ValueError("bad trajectory magic bytes")
        version, n, m, d, seed = struct.unpack("<IQQQq", raw[8:44])
        if version != 1:
            raise ValueError(f"unsupported trajectory version {version}")
        body = np.frombuffer(raw[44:], dtype="<f8")
        if body.size != m + n * m * d:
            raise ValueError("trajectory payload size does not match header")
        return cls(body[:m].copy(), body[m:].reshape(n, m, d).copy(), seed)

    def write_binary(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    def to_csv(self) -> str:
        n, m, d = self.states.shape
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["path", "step", "t", *[f"x{j}" for j in range(d)]])
        t = self.t
        for i in range(n):
            for k in range(m):
                w.writerow([i, k, repr(float(t[k])), *[repr(float(v)) for v in self.states[i, k]]])
        return buf.getvalue()


def uniform_times(steps: int, t_min: float = T_MIN, t_max: float = T_MAX) -> np.ndarray:
    """Decreasing forward times t_max = t_0 > ... > t_steps = t_min."""
    if steps < 1:
        raise ValueError("need at least one step")
    return np.linspace(t_max, t_min, steps + 1)


def _integrate(proc, field, n, times, seed, record, denoise, x_init=None):
    times = np.asarray(times, dtype=np.float64)
    if np.any(np.diff(times) >= 0):
        raise ValueError("reverse-time nodes must be strictly decreasing")
    steps = len(times) - 1
    record = np.arange(steps + 1) if record is None else np.asarray(sorted(set(int(r) for r in record)))
    d = proc.dim
    out = np.empty((n, len(record), d))
    if n == 0:
        return out, record
    if x_init is None:
        x = prior_draws(proc, seed, n)
    else:
        x = np.array(x_init, dtype=np.float64, copy=True)
        if x.shape != (n, d):
            raise ValueError(f"initial states have shape {x.shape}, expected {(n, d)}")
    slot = 0
    if record[0] == 0:
        out[:, 0] = x
        slot = 1
    for k in range(steps):
        t, dt = float(times[k]), float(times[k] - times[k + 1])
        g2 = float(proc.g_squared(t))
        drift = -proc.drift(x, t) + g2 * field.evaluate(x, t)
        x = x + drift * dt
        if not (denoise and k == steps - 1):
            x = x + np.sqrt(g2 * dt) * step_noise(seed, k, n, d)
        if not np.all(np.isfinite(x)):
            raise SamplerError(f"non-finite state at step {k} (t={t:.6g})", step=k)
        if slot < len(record) and record[slot] == k + 1:
            out[:, slot] = x
            slot += 1
    return out, record


def reverse_sample(proc: DiffusionProcess, field: ScoreField, n: int, steps: int, seed: int,
                   times=None, record=None, denoise: bool = False, x_init=None) -> TrajectoryEnsemble:
    """Integrate dx = [f - g^2 s] dt + g dw-bar from t_max down to t_min.

    ``times`` overrides the uniform step schedule (must be decreasing).
    ``record`` selects which node indices to keep (default: all).
    ``x_init`` replaces the prior draws as starting states.
    """
    times = uniform_times(steps) if times is None else np.asarray(times, dtype=np.float64)
    states, idx = _integrate(proc, field, n, times, seed, record, denoise, x_init)
    return TrajectoryEnsemble(1.0 - times[idx], states, seed, picture="reverse")


def controlled_forward_ensemble(proc: DiffusionProcess, field: ScoreField, n: int, steps: int, seed: int,
                                times=None, record=None, denoise: bool = False, x_init=None) -> TrajectoryEnsemble:
    """Same recursion on the clock tau = 1 - t, drift -f + g^2 s_theta."""
    ens = reverse_sample(proc, field, n, steps, seed, times, record, denoise, x_init)
    ens.picture = "controlled-forward"
    return ens
