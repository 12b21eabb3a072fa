"""Fixed-point encoding of reals into the ring Z_{2^64}.

A real ``x`` is represented by the residue ``round(x * 2**f) mod 2**64``
interpreted as a two's-complement integer. Ring addition, subtraction and
multiplication wrap silently, which is what additive secret sharing needs.
Vector operations are backed by ``numpy.uint64`` arrays, whose arithmetic
already wraps modulo 2^64.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NewType

import numpy as np

RING_BITS = 64
RING_MODULUS = 1 << RING_BITS
DEFAULT_FRACTION_BITS = 24

_SIGN_BIT = 1 << (RING_BITS - 1)

# An element of Z_{2^64}, stored as a Python int in [0, 2^64).
RingElement = NewType("RingElement", int)


class RingOverflowError(OverflowError):
    """Raised when a real value does not fit the signed fixed-point range."""


class DimensionError(ValueError):
    """Raised when two vectors disagree in shape or fraction bits."""


def encode(x: float, fraction_bits: int = DEFAULT_FRACTION_BITS) -> RingElement:
    """Encode ``x`` as ``round(x * 2**f)`` in two's complement mod 2^64.

    Rounding is half-to-even, matching :func:`numpy.rint` used by the
    vector path.
    """
    x = float(x)
    if x != x:
        raise RingOverflowError("cannot encode NaN")
    if abs(x) * 2.0**fraction_bits >= 2.0 ** (RING_BITS - 1):
        raise RingOverflowError(f"|{x}| * 2^{fraction_bits} does not fit in 63 bits")
    return RingElement(round(x * 2.0**fraction_bits) % RING_MODULUS)


def to_signed(e: int) -> int:
    e %= RING_MODULUS
    return e - RING_MODULUS if e & _SIGN_BIT else e


def decode(e: int, fraction_bits: int = DEFAULT_FRACTION_BITS) -> float:
    return to_signed(e) / (1 << fraction_bits)


def ring_add(a: int, b: int) -> RingElement:
    return RingElement((a + b) % RING_MODULUS)


def ring_sub(a: int, b: int) -> RingElement:
    return RingElement((a - b) % RING_MODULUS)


def ring_mul(a: int, b: int) -> RingElement:
    return RingElement((a * b) % RING_MODULUS)


def ring_neg(a: int) -> RingElement:
    return RingElement(-a % RING_MODULUS)


def encode_array(x: np.ndarray, fraction_bits: int = DEFAULT_FRACTION_BITS) -> np.ndarray:
    """Vectorised :func:`encode`; returns a ``uint64`` array of the same shape."""
    x = np.asarray(x, dtype=np.float64)
    scale = 2.0**fraction_bits
    if x.size:
        peak = float(np.max(np.abs(x)))
        # NaN fails the comparison too
        if not peak * scale < 2.0 ** (RING_BITS - 1):
            if not np.all(np.isfinite(x)):
                raise RingOverflowError("cannot encode non-finite values")
            raise RingOverflowError(f"value exceeds the {RING_BITS - 1 - fraction_bits}-bit integer range")
    scaled = x * scale
    np.rint(scaled, out=scaled)
    return scaled.astype(np.int64).view(np.uint64)


def decode_array(e: np.ndarray, fraction_bits: int = DEFAULT_FRACTION_BITS) -> np.ndarray:
    e = np.asarray(e, dtype=np.uint64)
    return e.view(np.int64).astype(np.float64) / 2.0**fraction_bits


@dataclass(frozen=True, eq=False)
class FixedVector:
    """A vector (or matrix of row vectors) of ring elements sharing one ``f``.

    ``elems`` is a ``uint64`` array; all arithmetic wraps modulo 2^64.
    """

    elems: np.ndarray
    fraction_bits: int = DEFAULT_FRACTION_BITS

    def __post_init__(self):
        arr = np.asarray(self.elems)
        if arr.dtype != np.uint64:
            if arr.dtype.kind not in "iu":
                raise TypeError(f"ring elements must be integers, got {arr.dtype}")
            # two's complement reinterpretation is reduction mod 2^64
            arr = arr.astype(np.int64).view(np.uint64) if arr.dtype.kind == "i" else arr.astype(np.uint64)
        object.__setattr__(self, "elems", arr)

    @classmethod
    def from_floats(cls, x, fraction_bits: int = DEFAULT_FRACTION_BITS) -> FixedVector:
        return cls(encode_array(x, fraction_bits), fraction_bits)

    @classmethod
    def zeros(cls, shape, fraction_bits: int = DEFAULT_FRACTION_BITS) -> FixedVector:
        return cls(np.zeros(shape, dtype=np.uint64), fraction_bits)

    def to_floats(self) -> np.ndarray:
        return decode_array(self.elems, self.fraction_bits)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.elems.shape

    def __len__(self) -> int:
        return len(self.elems)

    def _check(self, other: FixedVector) -> None:
        if not isinstance(other, FixedVector):
            raise TypeError(f"expected FixedVector, got {type(other).__name__}")
        if self.elems.shape != other.elems.shape:
            raise DimensionError(f"shape mismatch: {self.elems.shape} vs {other.elems.shape}")
        if self.fraction_bits != other.fraction_bits:
            raise DimensionError(
                f"fraction bits mismatch: {self.fraction_bits} vs {other.fraction_bits}")

    def __add__(self, other: FixedVector) -> FixedVector:
        self._check(other)
        return FixedVector(self.elems + other.elems, self.fraction_bits)

    def __sub__(self, other: FixedVector) -> FixedVector:
        self._check(other)
        return FixedVector(self.elems - other.elems, self.fraction_bits)

    def __neg__(self) -> FixedVector:
        return FixedVector(np.uint64(0) - self.elems, self.fraction_bits)

    def mul_public(self, c: int) -> FixedVector:
        """Multiply by a public integer constant (no rescaling)."""
        return FixedVector(self.elems * np.uint64(c % RING_MODULUS), self.fraction_bits)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FixedVector):
            return NotImplemented
        return (self.fraction_bits == other.fraction_bits
                and self.elems.shape == other.elems.shape
                and bool(np.array_equal(self.elems, other.elems)))

    def __getitem__(self, idx) -> FixedVector:
        return FixedVector(np.atleast_1d(self.elems[idx]), self.fraction_bits)

    def to_bytes(self) -> bytes:
        """Little-endian 8-byte words, row-major."""
        return self.elems.astype("<u8", copy=False).tobytes()

    @classmethod
    def from_bytes(cls, data, fraction_bits: int = DEFAULT_FRACTION_BITS, shape=None) -> FixedVector:
        if len(data) % 8:
            raise DimensionError("byte length is not a multiple of 8")
        arr = np.frombuffer(data, dtype="<u8").astype(np.uint64, copy=False)
        if shape is not None:
            arr = arr.reshape(shape)
        return cls(arr, fraction_bits)


def add(a: FixedVector, b: FixedVector) -> FixedVector:
    return a + b


def sub(a: FixedVector, b: FixedVector) -> FixedVector:
    return a - b
