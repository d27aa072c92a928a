"""Canonical model-parameter representation and arithmetic.

A :class:`ParameterVector` is the unit of model exchange between the
server and the agents: a flat float64 array plus a named-tensor layout
describing how trainers should reshape it. Vectors are immutable after
construction and all operations here are pure, so they can be shared
freely across threads.

The binary blob format (``serialize``/``deserialize``) is the only wire
and file format for model weights:

    magic "FSPV" | format version u16 | entry count u32
    per entry: name length u32 | UTF-8 name | rank u32 | dims u32...
    raw little-endian float64 payload

All integers are little-endian. Round-trips are bit exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DegenerateWeights,
    LayoutMismatch,
    MalformedBlob,
    NonFiniteValues,
)

MAGIC = b"FSPV"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelLayout:
    """Ordered named tensors with shapes; fixed for an experiment's lifetime."""

    entries: tuple[tuple[str, tuple[int, ...]], ...]
    total_len: int = field(init=False)

    def __post_init__(self):
        entries = tuple((str(n), tuple(int(d) for d in shape)) for n, shape in self.entries)
        object.__setattr__(self, "entries", entries)
        names = [n for n, _ in entries]
        if len(set(names)) != len(names) or any(not n for n in names):
            raise LayoutMismatch("tensor names must be unique and non-empty")
        for name, shape in entries:
            if any(d <= 0 for d in shape):
                raise LayoutMismatch(f"tensor {name!r} has non-positive dimension {shape}")
        total = sum(int(np.prod(shape)) for _, shape in entries)
        object.__setattr__(self, "total_len", total)

    def slices(self) -> dict[str, slice]:
        """Map each tensor name to its slice of the flat value array."""
        out, offset = {}, 0
        for name, shape in self.entries:
            n = int(np.prod(shape))
            out[name] = slice(offset, offset + n)
            offset += n
        return out


class ParameterVector:
    """Flat float64 weights bound to a :class:`ModelLayout`.

    Values are copied on construction and frozen; every element must be
    finite. A poisoned (NaN/Inf) update fails here, loudly, instead of
    corrupting the global model downstream.
    """

    __slots__ = ("layout", "values")

    def __init__(self, layout: ModelLayout, values):
        arr = np.asarray(values, dtype=np.float64).reshape(-1).copy()
        if arr.shape[0] != layout.total_len:
            raise LayoutMismatch(
                f"values length {arr.shape[0]} != layout total_len {layout.total_len}"
            )
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValues("parameter vector contains NaN or Inf")
        arr.flags.writeable = False
        object.__setattr__(self, "layout", layout)
        object.__setattr__(self, "values", arr)

    def __setattr__(self, *_):
        raise AttributeError("ParameterVector is immutable")

    def __len__(self) -> int:
        return self.layout.total_len

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ParameterVector)
            and self.layout == other.layout
            and np.array_equal(self.values, other.values)
        )

    def __repr__(self) -> str:
        return f"ParameterVector(len={len(self)}, tensors={len(self.layout.entries)})"

    def tensors(self) -> dict[str, np.ndarray]:
        """Reshape the flat values into the layout's named tensors (views)."""
        return {
            name: self.values[sl].reshape(shape)
            for (name, shape), sl in zip(self.layout.entries, self.layout.slices().values())
        }

    def with_values(self, values) -> "ParameterVector":
        return ParameterVector(self.layout, values)

    @classmethod
    def zeros(cls, layout: ModelLayout) -> "ParameterVector":
        return cls(layout, np.zeros(layout.total_len))

    @classmethod
    def from_tensors(cls, layout: ModelLayout, tensors: dict[str, np.ndarray]) -> "ParameterVector":
        flat = np.empty(layout.total_len)
        for (name, shape), sl in zip(layout.entries, layout.slices().values()):
            flat[sl] = np.asarray(tensors[name], dtype=np.float64).reshape(-1)
        return cls(layout, flat)


def _require_same_layout(vectors: Iterable[ParameterVector]) -> ModelLayout:
    layouts = {v.layout for v in vectors}
    if len(layouts) != 1:
        raise LayoutMismatch("vectors do not share a single layout")
    return next(iter(layouts))


def weighted_mean(vectors: Sequence[ParameterVector], weights: Sequence[float]) -> ParameterVector:
    """Convex combination sum(w_k * v_k) / sum(w_k) of same-layout vectors."""
    if not vectors:
        raise DegenerateWeights("no vectors to average")
    if len(weights) != len(vectors):
        raise DegenerateWeights("weights length must match vectors length")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or w.sum() <= 0:
        raise DegenerateWeights("weights must be non-negative with positive sum")
    layout = _require_same_layout(vectors)
    acc = np.zeros(layout.total_len)
    for wk, vk in zip(w, vectors):
        acc += wk * vk.values
    return ParameterVector(layout, acc / w.sum())


def l2_norm(v: ParameterVector) -> float:
    """Euclidean norm of the flat values."""
    return float(np.linalg.norm(v.values))


def axpy(alpha: float, x: ParameterVector, y: ParameterVector) -> ParameterVector:
    """alpha * x + y, element-wise, with a shared layout."""
    _require_same_layout((x, y))
    return ParameterVector(x.layout, alpha * x.values + y.values)


def serialize(v: ParameterVector) -> bytes:
    """Encode a vector into the FSPV blob format (bit exact)."""
    parts = [MAGIC, struct.pack("<H", FORMAT_VERSION), struct.pack("<I", len(v.layout.entries))]
    for name, shape in v.layout.entries:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", len(shape)))
        parts.append(struct.pack(f"<{len(shape)}I", *shape))
    parts.append(v.values.astype("<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise MalformedBlob(f"truncated blob: needed {n} bytes at offset {self.pos}")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def deserialize(blob: bytes) -> ParameterVector:
    """Decode an FSPV blob; raises :class:`MalformedBlob` on any defect."""
    r = _Reader(blob)
    if r.take(4) != MAGIC:
        raise MalformedBlob("bad magic bytes")
    version = r.u16()
    if version != FORMAT_VERSION:
        raise MalformedBlob(f"unsupported format version {version}")
    count = r.u32()
    entries = []
    for _ in range(count):
        name_len = r.u32()
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedBlob(f"tensor name is not valid UTF-8: {exc}") from exc
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank)) if rank else ()
        entries.append((name, dims))
    try:
        layout = ModelLayout(tuple(entries))
    except LayoutMismatch as exc:
        raise MalformedBlob(f"invalid layout: {exc}") from exc
    payload = r.take(8 * layout.total_len)
    if r.pos != len(blob):
        raise MalformedBlob(f"{len(blob) - r.pos} trailing bytes after payload")
    values = np.frombuffer(payload, dtype="<f8")
    try:
        return ParameterVector(layout, values)
    except NonFiniteValues as exc:
        raise MalformedBlob(str(exc)) from exc
