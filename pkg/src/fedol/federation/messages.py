"""Protocol messages and their binary encoding.

Payload layout: protocol version (u16), variant tag (u8), then the fields in
declared order. Integers are little-endian i64, reals little-endian f64,
strings u32 length + UTF-8, arrays u32 ndim + u32 dims + f64 data. Frames
on a stream socket are a 4-byte big-endian length followed by the payload.

Every array field declares its shape in terms of ``p`` (covariates) and
``K`` (sources) only. Nothing in the schema is sized by the number of rows
of a batch, so no message can carry a data matrix; :func:`encode` enforces
the declared shapes at run time.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from typing import ClassVar

import numpy as np

PROTOCOL_VERSION = 1

_HEAD = struct.Struct("<HB")
_I64 = struct.Struct("<q")
_F64 = struct.Struct("<d")
_U32 = struct.Struct("<I")
_FRAME = struct.Struct(">I")
MAX_FRAME = 1 << 30


class ProtocolError(RuntimeError):
    pass


class HandshakeError(ProtocolError):
    pass


# field kinds: "int", "real", "str", or an array shape made of "p" and "K"
_ARRAY_SYMBOLS = frozenset({"p", "K"})


@dataclass
class Message:
    TAG: ClassVar[int] = 0
    SCHEMA: ClassVar[dict[str, object]] = {}


@dataclass
class Hello(Message):
    """First message on every channel, client to coordinator."""

    TAG: ClassVar[int] = 1
    SCHEMA: ClassVar[dict[str, object]] = {
        "protocol_version": "int",
        "source_id": "int",
        "p": "int",
    }
    protocol_version: int
    source_id: int
    p: int


@dataclass
class Welcome(Message):
    TAG: ClassVar[int] = 2
    SCHEMA: ClassVar[dict[str, object]] = {"protocol_version": "int", "K": "int"}
    protocol_version: int
    K: int


@dataclass
class BatchStart(Message):
    """Opens batch ``batch_index``; the client loads its locally arrived batch.

    The penalty levels and step are those the coordinator starts from; they
    change during tuning and travel with every broadcast.
    """

    TAG: ClassVar[int] = 3
    SCHEMA: ClassVar[dict[str, object]] = {
        "batch_index": "int",
        "lambda1": "real",
        "lambda2": "real",
        "omega": "real",
    }
    batch_index: int
    lambda1: float
    lambda2: float
    omega: float


@dataclass
class BatchReady(Message):
    TAG: ClassVar[int] = 4
    SCHEMA: ClassVar[dict[str, object]] = {
        "source_id": "int",
        "batch_index": "int",
        "n_batch": "int",
        "n_cum": "int",
        "lipschitz": "real",
        "beta_prev": ("p",),
    }
    source_id: int
    batch_index: int
    n_batch: int
    n_cum: int
    lipschitz: float
    beta_prev: np.ndarray


@dataclass
class GlobalBroadcast(Message):
    """Current coefficients; the receiver updates column ``column``."""

    TAG: ClassVar[int] = 5
    SCHEMA: ClassVar[dict[str, object]] = {
        "round": "int",
        "column": "int",
        "omega": "real",
        "n_total": "int",
        "B": ("p", "K"),
    }
    round: int
    column: int
    omega: float
    n_total: int
    B: np.ndarray


@dataclass
class LocalUpdate(Message):
    TAG: ClassVar[int] = 6
    SCHEMA: ClassVar[dict[str, object]] = {
        "source_id": "int",
        "round": "int",
        "beta_bar": ("p",),
        "loss": "real",
    }
    source_id: int
    round: int
    beta_bar: np.ndarray
    loss: float


@dataclass
class SummaryRequest(Message):
    TAG: ClassVar[int] = 7
    SCHEMA: ClassVar[dict[str, object]] = {"beta": ("p",)}
    beta: np.ndarray


@dataclass
class SummaryReport(Message):
    """Accumulated Hessian at the requested point (divide-and-conquer baseline)."""

    TAG: ClassVar[int] = 8
    SCHEMA: ClassVar[dict[str, object]] = {
        "source_id": "int",
        "n_cum": "int",
        "J": ("p", "p"),
    }
    source_id: int
    n_cum: int
    J: np.ndarray


@dataclass
class Converged(Message):
    """Final fit of a batch; the client folds ``beta_hat`` into its state."""

    TAG: ClassVar[int] = 9
    SCHEMA: ClassVar[dict[str, object]] = {
        "batch_index": "int",
        "lambda1": "real",
        "lambda2": "real",
        "mbic": "real",
        "n_groups": "int",
        "beta_hat": ("p",),
    }
    batch_index: int
    lambda1: float
    lambda2: float
    mbic: float
    n_groups: int
    beta_hat: np.ndarray


@dataclass
class Absorbed(Message):
    TAG: ClassVar[int] = 10
    SCHEMA: ClassVar[dict[str, object]] = {"source_id": "int", "batches_seen": "int"}
    source_id: int
    batches_seen: int


@dataclass
class Shutdown(Message):
    TAG: ClassVar[int] = 11
    SCHEMA: ClassVar[dict[str, object]] = {}


@dataclass
class Failure(Message):
    """A client could not serve a request."""

    TAG: ClassVar[int] = 12
    SCHEMA: ClassVar[dict[str, object]] = {"source_id": "int", "reason": "str"}
    source_id: int
    reason: str


@dataclass
class FitSummary(Message):
    """Canonical serialization of a fit, used for byte-level comparisons."""

    TAG: ClassVar[int] = 13
    SCHEMA: ClassVar[dict[str, object]] = {
        "lambda1": "real",
        "lambda2": "real",
        "mbic": "real",
        "objective": "real",
        "converged": "int",
        "outer_iters": "int",
        "labels": ("K",),
        "B_hat": ("p", "K"),
    }
    lambda1: float
    lambda2: float
    mbic: float
    objective: float
    converged: int
    outer_iters: int
    labels: np.ndarray
    B_hat: np.ndarray


VARIANTS: dict[int, type[Message]] = {
    cls.TAG: cls
    for cls in (
        Hello,
        Welcome,
        BatchStart,
        BatchReady,
        GlobalBroadcast,
        LocalUpdate,
        SummaryRequest,
        SummaryReport,
        Converged,
        Absorbed,
        Shutdown,
        Failure,
        FitSummary,
    )
}


def array_shapes() -> dict[tuple[str, str], tuple[str, ...]]:
    """Declared shape of every array field, keyed by (variant, field)."""
    out = {}
    for cls in VARIANTS.values():
        for name, kind in cls.SCHEMA.items():
            if isinstance(kind, tuple):
                out[(cls.__name__, name)] = kind
    return out


def _check_schema():
    for cls in VARIANTS.values():
        names = [f.name for f in fields(cls)]
        if names != list(cls.SCHEMA):
            raise AssertionError(f"{cls.__name__}: schema and fields disagree")
        for kind in cls.SCHEMA.values():
            if isinstance(kind, tuple) and not set(kind) <= _ARRAY_SYMBOLS:
                raise AssertionError(f"{cls.__name__}: array sized by {kind}")


_check_schema()


def _bind(shape: tuple[int, ...], kind: tuple[str, ...], dims: dict[str, int], where: str):
    if len(shape) != len(kind):
        raise ProtocolError(f"{where}: expected {len(kind)}-D array, got shape {shape}")
    for size, sym in zip(shape, kind):
        if dims.setdefault(sym, size) != size:
            raise ProtocolError(f"{where}: dimension {sym} is {dims[sym]}, got {size}")


def encode(msg: Message, p: int | None = None, K: int | None = None) -> bytes:
    """Serialize ``msg``; ``p``/``K`` pin the allowed array dimensions."""
    dims: dict[str, int] = {}
    if p is not None:
        dims["p"] = p
    if K is not None:
        dims["K"] = K
    parts = [_HEAD.pack(PROTOCOL_VERSION, msg.TAG)]
    for name, kind in msg.SCHEMA.items():
        value = getattr(msg, name)
        where = f"{type(msg).__name__}.{name}"
        if kind == "int":
            parts.append(_I64.pack(int(value)))
        elif kind == "real":
            parts.append(_F64.pack(float(value)))
        elif kind == "str":
            raw = str(value).encode("utf-8")
            parts.append(_U32.pack(len(raw)) + raw)
        else:
            arr = np.asarray(value, dtype="<f8")
            _bind(arr.shape, kind, dims, where)
            parts.append(_U32.pack(arr.ndim))
            parts.append(b"".join(_U32.pack(d) for d in arr.shape))
            parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode(data: bytes) -> Message:
    if len(data) < _HEAD.size:
        raise ProtocolError("payload too short")
    version, tag = _HEAD.unpack_from(data, 0)
    if version != PROTOCOL_VERSION:
        raise HandshakeError(f"protocol version {version}, expected {PROTOCOL_VERSION}")
    cls = VARIANTS.get(tag)
    if cls is None:
        raise ProtocolError(f"unknown message tag {tag}")
    pos = _HEAD.size
    values = {}
    dims: dict[str, int] = {}
    try:
        for name, kind in cls.SCHEMA.items():
            if kind == "int":
                (values[name],) = _I64.unpack_from(data, pos)
                pos += 8
            elif kind == "real":
                (values[name],) = _F64.unpack_from(data, pos)
                pos += 8
            elif kind == "str":
                (n,) = _U32.unpack_from(data, pos)
                pos += 4
                values[name] = data[pos : pos + n].decode("utf-8")
                pos += n
            else:
                (ndim,) = _U32.unpack_from(data, pos)
                pos += 4
                shape = tuple(_U32.unpack_from(data, pos + 4 * d)[0] for d in range(ndim))
                pos += 4 * ndim
                _bind(shape, kind, dims, f"{cls.__name__}.{name}")
                size = 8 * int(np.prod(shape, dtype=np.int64))
                if pos + size > len(data):
                    raise ProtocolError(f"{cls.__name__}.{name}: truncated array")
                values[name] = np.frombuffer(data, "<f8", count=size // 8, offset=pos).reshape(shape).astype(float)
                pos += size
    except struct.error as exc:
        raise ProtocolError(f"{cls.__name__}: truncated payload") from exc
    if pos != len(data):
        raise ProtocolError(f"{cls.__name__}: {len(data) - pos} trailing bytes")
    return cls(**values)


def frame(payload: bytes) -> bytes:
    if len(payload) > MAX_FRAME:
        raise ProtocolError(f"frame of {len(payload)} bytes exceeds the limit")
    return _FRAME.pack(len(payload)) + payload


def frame_length(header: bytes) -> int:
    (n,) = _FRAME.unpack(header)
    if n > MAX_FRAME:
        raise ProtocolError(f"frame of {n} bytes exceeds the limit")
    return n
