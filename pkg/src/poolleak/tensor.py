"""Dense float32 tensors with row-major layout and zero padding.

A :class:`Tensor` is a read-only numpy array plus an explicit shape. There is
no broadcasting, no strides and no views: every tensor owns its data.
"""

from __future__ import annotations

import json
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import FormatError, LengthMismatch, OutOfBounds, RankError

MAX_RANK = 4


def _check_shape(shape: Iterable[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in shape)
    if not 1 <= len(dims) <= MAX_RANK:
        raise RankError(f"rank must be 1..{MAX_RANK}, got {len(dims)}")
    if any(d < 1 for d in dims):
        raise RankError(f"every dim must be >= 1, got {dims}")
    return dims


class Tensor:
    """Immutable float32 tensor of rank 1 to 4."""

    __slots__ = ("_array",)

    def __init__(self, shape: Sequence[int], data: Any):
        dims = _check_shape(shape)
        flat = np.array(data, dtype=np.float32).reshape(-1)
        if flat.size != int(np.prod(dims)):
            raise LengthMismatch(
                f"shape {dims} needs {int(np.prod(dims))} values, got {flat.size}"
            )
        arr = flat.reshape(dims)
        arr.flags.writeable = False
        self._array = arr

    @classmethod
    def from_array(cls, array: np.ndarray) -> "Tensor":
        a = np.asarray(array)
        return cls(a.shape, a)

    @property
    def shape(self) -> tuple[int, ...]:
        return self._array.shape

    @property
    def rank(self) -> int:
        return self._array.ndim

    @property
    def size(self) -> int:
        return self._array.size

    @property
    def array(self) -> np.ndarray:
        """Read-only ndarray view in the tensor's shape."""
        return self._array

    @property
    def data(self) -> np.ndarray:
        """Flat row-major data (read-only)."""
        return self._array.reshape(-1)

    def at(self, *coords: int) -> float:
        if len(coords) == 1 and isinstance(coords[0], (list, tuple)):
            coords = tuple(coords[0])
        if len(coords) != self.rank:
            raise OutOfBounds(f"expected {self.rank} coords, got {len(coords)}")
        for c, d in zip(coords, self.shape):
            if not 0 <= c < d:
                raise OutOfBounds(f"coords {tuple(coords)} outside shape {self.shape}")
        return float(self.data[flat_offset(self.shape, coords)])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self._array, other._array)

    def __hash__(self) -> int:
        return hash((self.shape, self._array.tobytes()))

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)})"

    def to_dict(self) -> dict:
        # float(np.float32) -> shortest float64 repr that round-trips to the same float32
        return {"shape": list(self.shape), "data": [float(v) for v in self.data]}

    @classmethod
    def from_dict(cls, obj: dict) -> "Tensor":
        try:
            return cls(obj["shape"], obj["data"])
        except (KeyError, TypeError) as exc:
            raise FormatError(f"bad tensor record: {exc}") from exc


def tensor_new(shape: Sequence[int], data: Any) -> Tensor:
    return Tensor(shape, data)


def at(t: Tensor, coords: Sequence[int]) -> float:
    return t.at(*coords)


def flat_offset(shape: Sequence[int], coords: Sequence[int]) -> int:
    off = 0
    for c, d in zip(coords, shape):
        off = off * d + c
    return off


def pad2d(t: Tensor, pad: int) -> Tensor:
    """Zero-pad the two spatial dims of a C x H x W tensor."""
    if t.rank != 3:
        raise RankError(f"pad2d needs a rank-3 tensor, got rank {t.rank}")
    if pad < 0:
        raise ValueError("pad must be non-negative")
    return Tensor.from_array(pad_array(t.array, pad))


def pad_array(a: np.ndarray, pad: int) -> np.ndarray:
    """Zero-pad the last two axes of an array (any leading dims)."""
    if pad == 0:
        return a
    width = [(0, 0)] * (a.ndim - 2) + [(pad, pad), (pad, pad)]
    return np.pad(a, width, mode="constant", constant_values=0)


def dumps(t: Tensor) -> str:
    return json.dumps(t.to_dict())


def loads(text: str) -> Tensor:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(str(exc)) from exc
    return Tensor.from_dict(obj)
