"""Flat binary format for trainable score-field weights.

Layout (all little-endian)::

    8 bytes   magic b"THRMSCOR"
    uint32    format version (1)
    uint32    variant code (1 = Linear, 2 = FeedForward)
    uint32    n_meta, then n_meta int64 values
    uint32    n_arrays, then for each array:
              uint32 ndim, ndim x uint64 shape, float64 data in row-major order

Meta is ``[d, knots]`` for Linear and ``[d, embedding, n_hidden, *hidden,
skip]`` for FeedForward, each followed by ``step, n_weights``.
Array 0 holds the process descriptor ``[kind (0=VE, 1=VP), sigma, r, dim]``.
The model weights follow, then any optimizer state arrays.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .process import VE, VP, DiffusionProcess
from .scorefield import FeedForwardScore, LinearScore, TrainableField

MAGIC = b"THRMSCOR"
VERSION = 1
_LINEAR, _FEEDFORWARD = 1, 2


class CheckpointError(ValueError):
    pass


def _write_array(buf, arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(arr.tobytes(order="C"))


def _read_exact(buf, n, what):
    raw = buf.read(n)
    if len(raw) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return raw


def _read_array(buf):
    (ndim,) = struct.unpack("<I", _read_exact(buf, 4, "array rank"))
    if ndim > 8:
        raise CheckpointError(f"implausible array rank {ndim}")
    shape = struct.unpack(f"<{ndim}Q", _read_exact(buf, 8 * ndim, "array shape"))
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    data = np.frombuffer(_read_exact(buf, 8 * count, "array data"), dtype="<f8")
    return data.reshape(shape).astype(np.float64)


def dumps(field: TrainableField, step: int = 0, optimizer_state: list[np.ndarray] | None = None) -> bytes:
    proc = field.proc
    if isinstance(field, LinearScore):
        code, meta = _LINEAR, [proc.dim, field.knots]
    elif isinstance(field, FeedForwardScore):
        code = _FEEDFORWARD
        meta = [proc.dim, field.time_embedding_size, len(field.hidden_sizes), *field.hidden_sizes, int(field.skip)]
    else:
        raise CheckpointError(f"cannot serialize field variant {field.variant!r}")
    weights = field.params()
    extra = optimizer_state or []
    meta = [*meta, int(step), len(weights)]
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, code))
    buf.write(struct.pack("<I", len(meta)))
    buf.write(struct.pack(f"<{len(meta)}q", *meta))
    arrays = [np.array([0.0 if proc.kind == VE else 1.0, proc.sigma, proc.r, proc.dim])]
    arrays += list(weights) + list(extra)
    buf.write(struct.pack("<I", len(arrays)))
    for arr in arrays:
        _write_array(buf, arr)
    return buf.getvalue()


def peek_variant(raw: bytes) -> str:
    """Model variant named in a checkpoint header, without parsing the arrays."""
    if raw[: len(MAGIC)] != MAGIC or len(raw) < len(MAGIC) + 8:
        raise CheckpointError("bad magic bytes")
    _, code = struct.unpack("<II", raw[len(MAGIC): len(MAGIC) + 8])
    names = {_LINEAR: "Linear", _FEEDFORWARD: "FeedForward"}
    if code not in names:
        raise CheckpointError(f"unknown variant code {code}")
    return names[code]


def loads(raw: bytes, source: str = "<bytes>"):
    """Parse a checkpoint. Returns ``(field, step, optimizer_state)``."""
    buf = io.BytesIO(raw)
    try:
        if buf.read(len(MAGIC)) != MAGIC:
            raise CheckpointError("bad magic bytes")
        version, code = struct.unpack("<II", _read_exact(buf, 8, "header"))
        if version != VERSION:
            raise CheckpointError(f"unsupported format version {version}")
        (n_meta,) = struct.unpack("<I", _read_exact(buf, 4, "meta count"))
        if n_meta > 1024:
            raise CheckpointError("implausible meta count")
        meta = list(struct.unpack(f"<{n_meta}q", _read_exact(buf, 8 * n_meta, "meta")))
        (n_arrays,) = struct.unpack("<I", _read_exact(buf, 4, "array count"))
        arrays = [_read_array(buf) for _ in range(n_arrays)]
        if buf.read(1):
            raise CheckpointError("trailing bytes after last array")
        if not arrays or arrays[0].shape != (4,):
            raise CheckpointError("missing process descriptor")
        kind_code, sigma, r, dim = arrays[0]
        proc = DiffusionProcess(kind=VE if kind_code == 0 else VP, sigma=float(sigma), r=float(r), dim=int(dim))
        step, n_weights = meta[-2], meta[-1]
        weights = arrays[1:1 + n_weights]
        opt_state = arrays[1 + n_weights:]
        if code == _LINEAR:
            d, knots = meta[0], meta[1]
            if d != proc.dim or len(weights) != 2:
                raise CheckpointError("linear checkpoint does not match its header")
            field = LinearScore(proc, knots=knots, weights=weights[0], bias=weights[1])
        elif code == _FEEDFORWARD:
            d, emb, n_hidden = meta[0], meta[1], meta[2]
            hidden = meta[3:3 + n_hidden]
            if d != proc.dim or len(meta) != n_hidden + 6:
                raise CheckpointError("feed-forward checkpoint does not match its header")
            field = FeedForwardScore(proc, hidden, emb, params=weights, skip=bool(meta[3 + n_hidden]))
        else:
            raise CheckpointError(f"unknown variant code {code}")
    except CheckpointError as exc:
        raise CheckpointError(f"{source}: {exc}") from None
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{source}: malformed checkpoint ({exc})") from None
    return field, int(step), opt_state


def save(path, field: TrainableField, step: int = 0, optimizer_state=None) -> None:
    Path(path).write_bytes(dumps(field, step, optimizer_state))


def load(path):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc.strerror})") from None
    return loads(raw, str(path))
