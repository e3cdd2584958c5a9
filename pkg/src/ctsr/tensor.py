"""Dense float32 tensors on contiguous numpy buffers, plus a seeded RNG.

Tensors are row-major (last extent varies fastest) and hold 32-bit floats.
Reductions accumulate in 64-bit: ``reduce_sum``/``reduce_mean``/``dot`` use
exact correctly-rounded summation (math.fsum), which is deterministic on
every platform and independent of association order.

The random generator is SplitMix64 used in counter mode: output ``i`` of a
stream seeded with ``s`` is ``mix64(s + (i + 1) * 0x9E3779B97F4A7C15)`` with
the standard SplitMix64 finalizer.  Identical seeds therefore produce
bit-identical streams everywhere.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

_U64_MASK = 0xFFFFFFFFFFFFFFFF
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


class NonFiniteError(ValueError):
    """A NaN or Inf reached a public tensor operation."""


def validate_shape(shape: Sequence[int]) -> tuple[int, ...]:
    """Check extents are positive ints and the element count fits in memory."""
    extents = tuple(shape)
    if not extents:
        raise ValueError("shape must have at least one extent")
    count = 1
    for e in extents:
        if not isinstance(e, (int, np.integer)) or isinstance(e, bool) or e < 1:
            raise ValueError(f"shape extents must be positive integers, got {extents!r}")
        count *= int(e)
    if count > np.iinfo(np.intp).max:
        raise ValueError(f"element count {count} overflows the platform index range")
    return tuple(int(e) for e in extents)


def element_count(shape: Sequence[int]) -> int:
    return math.prod(validate_shape(shape))


class Tensor:
    """Immutable-by-convention float32 array.

    Only the SGD update mutates a tensor in place (via ``data``); everything
    else treats tensors as read-only values.  Construction rejects non-finite
    values so NaN/Inf never propagate silently.
    """

    __slots__ = ("_data",)

    def __init__(self, data, shape: Sequence[int] | None = None):
        arr = np.ascontiguousarray(data, dtype=np.float32)
        if shape is not None:
            arr = arr.reshape(validate_shape(shape))
        if arr.ndim == 0:
            arr = arr.reshape(1)
        validate_shape(arr.shape)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor contains NaN or Inf")
        self._data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def size(self) -> int:
        return self._data.size

    @property
    def data(self) -> np.ndarray:
        """Underlying float32 buffer (do not mutate outside the optimizer)."""
        return self._data

    def tolist(self) -> list:
        return self._data.tolist()

    def copy(self) -> Tensor:
        return Tensor(self._data.copy())

    def reshape(self, shape: Sequence[int]) -> Tensor:
        return Tensor(self._data.reshape(validate_shape(shape)))

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and bool(
            np.array_equal(self._data, other._data)
        )

    def __hash__(self):
        raise TypeError("Tensor is not hashable")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


class Rng:
    """Deterministic SplitMix64 stream in counter mode.

    The counter advances by the number of values drawn, so a stream is fully
    described by (seed, counter) and two streams with the same seed yield
    bit-identical values in order.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _U64_MASK
        self.counter = int(counter)

    @staticmethod
    def _mix(states: np.ndarray) -> np.ndarray:
        z = states.copy()
        z ^= z >> np.uint64(30)
        z *= np.uint64(0xBF58476D1CE4E5B9)
        z ^= z >> np.uint64(27)
        z *= np.uint64(0x94D049BB133111EB)
        z ^= z >> np.uint64(31)
        return z

    def next_u64(self, count: int) -> np.ndarray:
        if count < 0:
            raise ValueError("count must be non-negative")
        idx = np.arange(self.counter + 1, self.counter + count + 1, dtype=np.uint64)
        self.counter += count
        states = np.uint64(self.seed) + idx * _GOLDEN
        return self._mix(states)

    def next_floats(self, count: int) -> np.ndarray:
        """float64 values in [0, 1) with 53 random bits each."""
        return (self.next_u64(count) >> np.uint64(11)) * np.float64(2.0**-53)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates, high index downward, j = floor(u * (i + 1))."""
        n = len(items)
        if n < 2:
            return
        draws = self.next_floats(n - 1)
        for pos, i in enumerate(range(n - 1, 0, -1)):
            j = int(draws[pos] * (i + 1))
            items[i], items[j] = items[j], items[i]


def derive_seed(seed: int, tag: int) -> int:
    """Derive an independent child seed; distinct tags give distinct streams."""
    mixed = (seed ^ (0xD1B54A32D192ED03 * (tag + 1))) & _U64_MASK
    state = np.array([mixed], dtype=np.uint64) + _GOLDEN
    return int(Rng._mix(state)[0])


def zeros(shape: Sequence[int]) -> Tensor:
    return Tensor(np.zeros(validate_shape(shape), dtype=np.float32))


def uniform_init(shape: Sequence[int], lo: float, hi: float, rng: Rng) -> Tensor:
    """I.i.d. uniform values in the half-open interval [lo, hi)."""
    if not (math.isfinite(lo) and math.isfinite(hi)) or lo >= hi:
        raise ValueError(f"need finite lo < hi, got lo={lo}, hi={hi}")
    extents = validate_shape(shape)
    u = rng.next_floats(math.prod(extents))
    vals = (lo + u * (hi - lo)).astype(np.float32)
    # float32 rounding can land exactly on hi; step those back to keep [lo, hi)
    top = np.float32(hi)
    vals = np.where(vals >= top, np.nextafter(top, np.float32(lo)), vals)
    return Tensor(vals.reshape(extents))


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return Tensor(a.data + b.data)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return Tensor(a.data - b.data)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    return Tensor(a.data * b.data)


def scale(a: Tensor, s: float) -> Tensor:
    if not math.isfinite(s):
        raise NonFiniteError(f"scale factor must be finite, got {s}")
    return Tensor(a.data * np.float32(s))


def reduce_sum(a: Tensor) -> float:
    return math.fsum(a.data.ravel().astype(np.float64))


def reduce_mean(a: Tensor) -> float:
    return reduce_sum(a) / a.size


def dot(a: Tensor, b: Tensor) -> float:
    """Inner product; float32*float32 products are exact in float64, and fsum
    rounds their sum correctly, so the result is the exactly-rounded dot."""
    _check_same_shape(a, b, "dot")
    prods = a.data.ravel().astype(np.float64) * b.data.ravel().astype(np.float64)
    return math.fsum(prods)
