"""Reading and writing the tensor-container checkpoint format.

Layout: an 8-byte little-endian unsigned header length ``N``, then ``N`` bytes
of JSON mapping each tensor name to ``{"dtype", "shape", "data_offsets"}``
(plus an optional ``"__metadata__"`` string map), then the raw little-endian
payload.  Offsets are relative to the start of the payload.

All values are held in memory as float64; ``F32``/``F16`` are storage dtypes
only.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

DTYPES = {"F32": np.dtype("<f4"), "F16": np.dtype("<f2")}
METADATA_KEY = "__metadata__"


class CheckpointFormatError(ValueError):
    """Raised for any structurally invalid checkpoint file."""


@dataclass(frozen=True)
class TensorMeta:
    name: str
    dtype: str
    shape: tuple[int, ...]
    byte_range: tuple[int, int]

    @property
    def nbytes(self) -> int:
        return math.prod(self.shape) * DTYPES[self.dtype].itemsize


@dataclass(frozen=True, eq=False)
class Tensor:
    """A float64 array together with the dtype it is stored as on disk."""

    values: np.ndarray
    dtype: str = "F32"

    def __post_init__(self):
        if self.dtype not in DTYPES:
            raise CheckpointFormatError(f"unknown dtype {self.dtype!r}")
        arr = np.array(self.values, dtype=np.float64, copy=True)
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


@dataclass(frozen=True, eq=False)
class TensorMap(Mapping):
    """Ordered, immutable name -> Tensor collection.

    Iteration is always in ascending lexicographic name order.
    """

    entries: Mapping[str, Tensor] = field(default_factory=dict)
    metadata: Mapping[str, str] = field(default_factory=dict)
    provenance: str | None = None

    def __post_init__(self):
        ordered = {}
        for name in sorted(self.entries):
            t = self.entries[name]
            if not isinstance(t, Tensor):
                t = Tensor(t)
            if name == METADATA_KEY:
                raise CheckpointFormatError(f"{METADATA_KEY!r} is reserved")
            ordered[name] = t
        for k, v in self.metadata.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise CheckpointFormatError("metadata must map strings to strings")
        object.__setattr__(self, "entries", ordered)
        object.__setattr__(self, "metadata", dict(self.metadata))

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], dtype: str = "F32", **kwargs) -> TensorMap:
        return cls({k: Tensor(v, dtype) for k, v in arrays.items()}, **kwargs)

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.values for k, t in self.entries.items()}

    def index(self) -> list[TensorMeta]:
        metas, offset = [], 0
        for name, t in self.entries.items():
            n = math.prod(t.shape) * DTYPES[t.dtype].itemsize
            metas.append(TensorMeta(name, t.dtype, tuple(t.shape), (offset, offset + n)))
            offset += n
        return metas

    def with_metadata(self, **extra: str) -> TensorMap:
        return TensorMap(self.entries, {**self.metadata, **extra}, self.provenance)

    def equals(self, other: TensorMap) -> bool:
        """Same names, dtypes, shapes and bit-identical values."""
        if list(self) != list(other):
            return False
        for name in self:
            a, b = self[name], other[name]
            if a.dtype != b.dtype or a.shape != b.shape:
                return False
            if a.values.tobytes() != b.values.tobytes():
                return False
        return True


def dumps_checkpoint(tmap: TensorMap) -> bytes:
    """Serialise deterministically: sorted names, minimal JSON, packed payload."""
    header: dict = {}
    if tmap.metadata:
        header[METADATA_KEY] = {k: tmap.metadata[k] for k in sorted(tmap.metadata)}
    chunks = []
    for meta in tmap.index():
        header[meta.name] = {
            "dtype": meta.dtype,
            "shape": list(meta.shape),
            "data_offsets": list(meta.byte_range),
        }
        chunks.append(tmap[meta.name].values.astype(DTYPES[meta.dtype]).tobytes())
    head = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    return struct.pack("<Q", len(head)) + head + b"".join(chunks)


def write_checkpoint(tmap: TensorMap, path: str | Path) -> None:
    Path(path).write_bytes(dumps_checkpoint(tmap))


def _reject_duplicates(pairs):
    out = {}
    for k, v in pairs:
        if k in out:
            raise CheckpointFormatError(f"duplicate key {k!r} in header")
        out[k] = v
    return out


def _parse_entry(name: str, spec) -> TensorMeta:
    if not isinstance(spec, dict):
        raise CheckpointFormatError(f"{name}: header entry is not an object")
    dtype = spec.get("dtype")
    if dtype not in DTYPES:
        raise CheckpointFormatError(f"{name}: unknown dtype {dtype!r}")
    shape = spec.get("shape")
    if not isinstance(shape, list) or not all(type(d) is int and d >= 0 for d in shape):
        raise CheckpointFormatError(f"{name}: bad shape {shape!r}")
    offsets = spec.get("data_offsets")
    if (
        not isinstance(offsets, list)
        or len(offsets) != 2
        or not all(type(o) is int and o >= 0 for o in offsets)
        or offsets[1] < offsets[0]
    ):
        raise CheckpointFormatError(f"{name}: bad data_offsets {offsets!r}")
    meta = TensorMeta(name, dtype, tuple(shape), (offsets[0], offsets[1]))
    if offsets[1] - offsets[0] != meta.nbytes:
        raise CheckpointFormatError(
            f"{name}: data_offsets span {offsets[1] - offsets[0]} bytes, "
            f"shape {shape} {dtype} needs {meta.nbytes}"
        )
    return meta


def loads_checkpoint(data: bytes, provenance: str | None = None) -> TensorMap:
    if len(data) < 8:
        raise CheckpointFormatError("truncated file: missing header length")
    (n,) = struct.unpack("<Q", data[:8])
    if 8 + n > len(data):
        raise CheckpointFormatError(f"truncated file: header claims {n} bytes, {len(data) - 8} available")
    try:
        header = json.loads(data[8 : 8 + n].decode("utf-8"), object_pairs_hook=_reject_duplicates)
    except CheckpointFormatError:
        raise
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"malformed JSON header: {exc}") from exc
    if not isinstance(header, dict):
        raise CheckpointFormatError("header is not a JSON object")

    metadata = header.pop(METADATA_KEY, None) or {}
    if not isinstance(metadata, dict) or not all(isinstance(v, str) for v in metadata.values()):
        raise CheckpointFormatError("__metadata__ must be a string map")

    payload = memoryview(data)[8 + n :]
    metas = sorted((_parse_entry(k, v) for k, v in header.items()), key=lambda m: m.byte_range)
    cursor = 0
    for meta in metas:
        begin, end = meta.byte_range
        if begin != cursor:
            kind = "overlap" if begin < cursor else "gap"
            raise CheckpointFormatError(f"{meta.name}: data_offsets {kind} at byte {begin} (expected {cursor})")
        cursor = end
    if cursor > len(payload):
        raise CheckpointFormatError(f"data_offsets exceed payload ({cursor} > {len(payload)})")
    if cursor != len(payload):
        raise CheckpointFormatError(f"{len(payload) - cursor} trailing payload bytes not covered by header")

    entries = {}
    for meta in metas:
        begin, end = meta.byte_range
        raw = np.frombuffer(payload[begin:end], dtype=DTYPES[meta.dtype])
        entries[meta.name] = Tensor(raw.astype(np.float64).reshape(meta.shape), meta.dtype)
    return TensorMap(entries, metadata, provenance)


def read_checkpoint(path: str | Path) -> TensorMap:
    """Load every tensor from ``path``, widening values to float64.

    Raises:
        CheckpointFormatError: truncated file, malformed header, unknown dtype,
            duplicate names, or inconsistent/overlapping data_offsets.
    """
    path = Path(path)
    return loads_checkpoint(path.read_bytes(), provenance=str(path))
