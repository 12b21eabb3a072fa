"""Seedable cryptographic randomness.

:class:`Csprng` is the ChaCha20 keystream under a key derived from a 32-byte
seed and a label path. Streams are addressed by label (``fork``) rather than
by consumption order, so a party's randomness for a given session, bank and
chunk is the same no matter in which order its messages arrive.

Samplers:

* uniform floats use the top 53 bits of a 64-bit word;
* Gaussian samples use Box-Muller on pairs of uniforms;
* Laplace samples use the inverse CDF.
"""
from __future__ import annotations

import hashlib
import math

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms

SEED_BYTES = 32
_ZERO_NONCE = b"\x00" * 16
_BLOCK = 1 << 20


_ZERO_CACHE = bytes(_BLOCK)


def _zeros(n: int) -> bytes:
    return _ZERO_CACHE if n == _BLOCK else bytes(n)


def seed_from_int(n: int) -> bytes:
    """Expand a small integer seed into a 32-byte seed (SHA-256)."""
    return hashlib.sha256(b"fedanomaly/seed/" + str(int(n)).encode()).digest()


def derive_seed(seed: bytes, *labels) -> bytes:
    h = hashlib.sha256(b"fedanomaly/derive")
    h.update(seed)
    for label in labels:
        part = label if isinstance(label, bytes) else str(label).encode()
        h.update(len(part).to_bytes(4, "big"))
        h.update(part)
    return h.digest()


class Csprng:
    def __init__(self, seed: bytes | int, *labels):
        if isinstance(seed, int):
            seed = seed_from_int(seed)
        if len(seed) != SEED_BYTES:
            raise ValueError(f"seed must be {SEED_BYTES} bytes, got {len(seed)}")
        self.seed = bytes(seed)
        self.labels = tuple(labels)
        key = derive_seed(self.seed, *labels)
        self._enc = Cipher(algorithms.ChaCha20(key, _ZERO_NONCE), mode=None).encryptor()

    def fork(self, *labels) -> Csprng:
        """Independent child stream; depends only on seed and label path."""
        return Csprng(self.seed, *self.labels, *labels)

    def random_bytes(self, n: int) -> bytes:
        return bytes(self._fill(n))

    def _fill(self, n: int) -> bytearray:
        out = bytearray(n)
        view = memoryview(out)
        zeros = memoryview(_zeros(min(n, _BLOCK)))
        pos = 0
        while pos < n:
            step = min(_BLOCK, n - pos)
            self._enc.update_into(zeros[:step], view[pos:pos + step])
            pos += step
        return out

    def uint64(self, shape) -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64))
        buf = self._fill(8 * count)
        return np.frombuffer(buf, dtype="<u8").astype(np.uint64, copy=False).reshape(shape)

    def randbelow(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection sampling."""
        if n <= 0:
            raise ValueError("n must be positive")
        k = max(1, (n - 1).bit_length())
        nbytes = (k + 7) // 8
        while True:
            r = int.from_bytes(self.random_bytes(nbytes), "big") >> (8 * nbytes - k)
            if r < n:
                return r

    def uniform(self, shape=None) -> np.ndarray | float:
        """Uniform floats in [0, 1)."""
        if shape is None:
            return float(self.uniform((1,))[0])
        return (self.uint64(shape) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64))
        half = (count + 1) // 2
        u1 = 1.0 - self.uniform((half,))  # (0, 1]
        u2 = self.uniform((half,))
        radius = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([radius * np.cos(2 * math.pi * u2), radius * np.sin(2 * math.pi * u2)])
        return (z[:count] * std).reshape(shape)

    def laplace(self, shape, scale: float = 1.0) -> np.ndarray:
        u = self.uniform(shape) - 0.5
        # 1 - 2|u| lies in (0, 1]; u = -0.5 exactly maps to log(0) and is nudged
        tail = np.maximum(1.0 - 2.0 * np.abs(u), 2.0**-53)
        return -scale * np.sign(u) * np.log(tail)

    def permutation(self, n: int) -> np.ndarray:
        keys = self.uint64((n,))
        return np.argsort(keys, kind="stable")

    def numpy_generator(self) -> np.random.Generator:
        """A PCG64 generator seeded from this stream, for non-secret simulation work."""
        return np.random.Generator(np.random.PCG64(int.from_bytes(self.random_bytes(32), "little")))
