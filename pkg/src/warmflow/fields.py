"""Flat array carrier used for samples, moments, masks and network I/O."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Raised when an array does not match the shape a consumer requires."""


@dataclass(frozen=True, eq=False)
class Field:
    """A flat float64 array plus the logical shape it represents.

    The data is always stored flat; ``shape`` records the logical extents
    (e.g. ``(channels, h, w)`` or ``(dims,)``). Entries must be finite.
    """

    data: np.ndarray
    shape: tuple[int, ...] = field(default=())

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64).ravel()
        shape = tuple(int(e) for e in (self.shape or (data.size,)))
        if math.prod(shape) != data.size:
            raise ShapeError(f"shape {shape} does not match data length {data.size}")
        if not np.all(np.isfinite(data)):
            raise ValueError("field contains non-finite entries")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "shape", shape)

    @classmethod
    def from_array(cls, arr) -> "Field":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(arr.ravel(), arr.shape)

    @property
    def size(self) -> int:
        return self.data.size

    def reshaped(self) -> np.ndarray:
        return self.data.reshape(self.shape)

    def with_data(self, data: np.ndarray) -> "Field":
        """Same logical shape, new values."""
        return Field(np.asarray(data, dtype=np.float64).ravel(), self.shape)


def as_flat(x) -> np.ndarray:
    """Accept a Field or array-like, return a flat float64 array."""
    if isinstance(x, Field):
        return x.data
    return np.asarray(x, dtype=np.float64).ravel()
