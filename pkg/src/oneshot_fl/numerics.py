"""Dense float64 vector arithmetic and reproducible random streams.

A parameter vector is represented as a one-dimensional ``float64`` numpy
array.  Every reduction over a list of vectors runs left to right in index
order, so results are bitwise reproducible for fixed inputs.

Random streams use numpy's Philox counter-based generator keyed by
``SeedSequence(seed, spawn_key=...)``.  The spawn key is derived from the
stream path (tags hashed with BLAKE2b), so a given ``(seed, stream_id)``
produces the same draws on every platform numpy supports.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Sequence, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

ParamVector = NDArray[np.float64]

VECTOR_MAGIC = b"OSFSVEC1"
_HEADER = struct.Struct("<8sQ")


class InvalidInputError(ValueError):
    """Raised for malformed arguments (non-finite values, empty inputs, bad ranges)."""


class ShapeError(ValueError):
    """Raised when vector dimensions do not agree."""


def as_vector(values: ArrayLike, *, copy: bool = True) -> ParamVector:
    """Validate ``values`` as a finite 1-D float64 vector and return it read-only."""
    arr = np.array(values, dtype=np.float64, copy=copy)
    if arr.ndim != 1:
        raise ShapeError(f"expected a 1-D vector, got shape {arr.shape}")
    if arr.size == 0:
        raise InvalidInputError("vector must have positive dimension")
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.isfinite(arr))[0])
        raise InvalidInputError(f"non-finite entry at index {bad}")
    arr.flags.writeable = False
    return arr


def _check_same_dim(a: ParamVector, b: ParamVector) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")


def l2_norm(v: ArrayLike) -> float:
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise InvalidInputError("l2_norm of a vector with non-finite entries")
    return float(np.sqrt(np.dot(v, v)))


def weighted_sum(vs: Sequence[ArrayLike], weights: Sequence[float]) -> ParamVector:
    """Return ``sum(weights[i] * vs[i])`` accumulated in ascending index order."""
    if len(vs) == 0:
        raise InvalidInputError("weighted_sum of an empty list")
    if len(vs) != len(weights):
        raise ShapeError(f"{len(vs)} vectors but {len(weights)} weights")
    if not all(np.isfinite(w) for w in weights):
        raise InvalidInputError("weights must be finite")
    first = np.asarray(vs[0], dtype=np.float64)
    acc = float(weights[0]) * first
    for v, w in zip(vs[1:], weights[1:]):
        v = np.asarray(v, dtype=np.float64)
        _check_same_dim(first, v)
        acc = acc + float(w) * v
    return acc


def vec_sub(a: ArrayLike, b: ArrayLike) -> ParamVector:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_dim(a, b)
    return a - b


def axpy(alpha: float, x: ArrayLike, y: ArrayLike) -> ParamVector:
    """``y + alpha * x``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_same_dim(x, y)
    return y + float(alpha) * x


# -- random streams ---------------------------------------------------------

Tag = Union[str, int]


def _tag_key(tag: Tag) -> int:
    if isinstance(tag, int):
        if tag < 0:
            raise InvalidInputError("integer stream tags must be non-negative")
        return tag
    digest = hashlib.blake2b(str(tag).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass(frozen=True)
class RngStream:
    """An addressable random stream: ``seed`` plus a path of purpose tags.

    ``generator()`` always starts the stream from its beginning; callers that
    need to continue a stream keep the returned generator.
    """

    seed: int
    stream_id: tuple[Tag, ...] = ()

    def __post_init__(self) -> None:
        if not 0 <= self.seed < 2**64:
            raise InvalidInputError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=tuple(_tag_key(t) for t in self.stream_id))
        return np.random.Generator(np.random.Philox(ss))

    def fork(self, purpose: Tag) -> "RngStream":
        return fork_stream(self, purpose)


def fork_stream(parent: RngStream, purpose: Tag) -> RngStream:
    return RngStream(parent.seed, parent.stream_id + (purpose,))


# -- binary vector format ---------------------------------------------------


def write_vector(fh: BinaryIO, v: ArrayLike) -> None:
    v = as_vector(v)
    fh.write(_HEADER.pack(VECTOR_MAGIC, v.shape[0]))
    fh.write(v.astype("<f8").tobytes())


def read_vector(fh: BinaryIO) -> ParamVector:
    header = fh.read(_HEADER.size)
    if len(header) != _HEADER.size:
        raise InvalidInputError("truncated vector header")
    magic, dim = _HEADER.unpack(header)
    if magic != VECTOR_MAGIC:
        raise InvalidInputError(f"bad magic {magic!r}, expected {VECTOR_MAGIC!r}")
    payload = fh.read(8 * dim)
    if len(payload) != 8 * dim:
        raise InvalidInputError(f"truncated payload: expected {dim} float64 values")
    return as_vector(np.frombuffer(payload, dtype="<f8"))


def save_vector(path: Union[str, Path], v: ArrayLike) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        write_vector(fh, v)
    tmp.replace(path)


def load_vector(path: Union[str, Path]) -> ParamVector:
    with open(path, "rb") as fh:
        return read_vector(fh)
