"""Two-party additive secret sharing over :class:`FixedVector`.

A sharing of ``x`` is a pair of shares whose payloads sum to ``x`` in the
ring. The first payload is a fresh uniform ring vector; the second is
``x`` minus it, so either payload alone is uniformly distributed.
"""
from __future__ import annotations

from dataclasses import dataclass

from .ring import DimensionError, FixedVector
from .rng import Csprng


@dataclass(frozen=True)
class Share:
    holder: str
    payload: FixedVector


def random_vector(shape, rng: Csprng, fraction_bits: int) -> FixedVector:
    return FixedVector(rng.uint64(shape), fraction_bits)


def share(x: FixedVector, rng: Csprng,
          holders: tuple[str, str] = ("hub", "aggregator")) -> tuple[Share, Share]:
    r0 = random_vector(x.shape, rng, x.fraction_bits)
    return Share(holders[0], r0), Share(holders[1], x - r0)


def reconstruct(a: Share | FixedVector, b: Share | FixedVector) -> FixedVector:
    pa = a.payload if isinstance(a, Share) else a
    pb = b.payload if isinstance(b, Share) else b
    return pa + pb


def add_shares(a: Share, b: Share) -> Share:
    """Local addition of two shares held by the same party."""
    if a.holder != b.holder:
        raise DimensionError(f"cannot add shares held by {a.holder!r} and {b.holder!r}")
    return Share(a.holder, a.payload + b.payload)


def add_constant_to_share(s: Share, c: FixedVector) -> Share:
    """Add a public or party-local constant; do this on exactly one side."""
    return Share(s.holder, s.payload + c)
