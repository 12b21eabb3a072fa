"""1-out-of-2 oblivious transfer.

Two interchangeable modes:

``ideal``
    The sender hands both messages to a dealer that releases only the chosen
    one. On the wire the dealer sits on the receiver side, so this mode gives
    no privacy against the receiver; it exists for deterministic simulation.

``crypto``
    The "simplest OT" of Chou and Orlandi over the order-q subgroup of the
    2048-bit MODP group (RFC 3526, group 14). One sender key ``A = g^a`` per
    session, one receiver element ``B_i`` per transfer; the pad for each
    message is a ChaCha20 keystream under ``SHA-256(sid, i, A, B_i, K)``.

Both modes speak the same three-message shape (mode ``ideal`` only uses the
first). Messages may have any length but ``v0`` and ``v1`` of one transfer
must be equal, so ciphertext length never depends on the choice bit.

The module also provides the masked selection that turns an OT into an
additive sharing of ``u_b``, and the per-account key cache that replaces
per-batch OTs by one OT of two symmetric keys per account.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Sequence

import gmpy2
import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

from .ring import FixedVector
from .rng import Csprng

MODES = ("ideal", "crypto")
SID_BYTES = 16
KEY_BYTES = 32
NONCE_BYTES = 12
# 1-out-of-n is the natural extension; only n = 2 is implemented.
MESSAGE_COUNT = 2

RFC3526_2048_P = int(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74"
    "020BBEA63B139B22514A08798E3404DDEF9519B3CD3A431B302B0A6DF25F1437"
    "4FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED"
    "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF05"
    "98DA48361C55D39A69163FA8FD24CF5F83655D23DCA3AD961C62F356208552BB"
    "9ED529077096966D670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B"
    "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF695581718"
    "3995497CEA956AE515D2261898FA051015728E5A8AACAA68FFFFFFFFFFFFFFFF", 16)


class OtError(Exception):
    pass


class SessionMismatchError(OtError):
    pass


class TranscriptError(OtError):
    pass


class DecryptionError(OtError):
    pass


class ModpGroup:
    """Quadratic-residue subgroup of Z_p^* for a safe prime p; g = 2 generates it."""

    def __init__(self, p: int = RFC3526_2048_P, g: int = 2, scalar_bits: int = 256):
        self.p = gmpy2.mpz(p)
        self.q = (self.p - 1) // 2
        self.g = gmpy2.mpz(g)
        self.element_bytes = (int(p).bit_length() + 7) // 8
        self.scalar_bits = scalar_bits

    def random_scalar(self, rng: Csprng) -> gmpy2.mpz:
        return gmpy2.mpz(1 + rng.randbelow((1 << self.scalar_bits) - 1))

    def exp(self, base, e) -> gmpy2.mpz:
        return gmpy2.powmod(base, e, self.p)

    def mul(self, a, b) -> gmpy2.mpz:
        return a * b % self.p

    def inv(self, a) -> gmpy2.mpz:
        return gmpy2.invert(a, self.p)

    def encode(self, x) -> bytes:
        return int(x).to_bytes(self.element_bytes, "big")

    def decode(self, data) -> gmpy2.mpz:
        x = int.from_bytes(data, "big")
        if not 2 <= x <= int(self.p) - 2:
            raise TranscriptError("group element out of range")
        return gmpy2.mpz(x)


DEFAULT_GROUP = ModpGroup()


@dataclass
class OtStats:
    transfers: int = 0
    sessions: int = 0


@dataclass(frozen=True)
class OtSenderInput:
    sid: bytes
    v0: bytes
    v1: bytes

    def __post_init__(self):
        if len(self.v0) != len(self.v1):
            raise ValueError("v0 and v1 must have equal length")


@dataclass(frozen=True)
class OtChoice:
    sid: bytes
    b: int

    def __post_init__(self):
        if self.b not in (0, 1):
            raise ValueError(f"choice bit must be 0 or 1, got {self.b!r}")


def _pad(key: bytes, n: int) -> np.ndarray:
    enc = Cipher(algorithms.ChaCha20(key, b"\x00" * 16), mode=None).encryptor()
    return np.frombuffer(enc.update(bytes(n)), dtype=np.uint8)


def _xor(data, key: bytes) -> bytes:
    arr = np.frombuffer(data, dtype=np.uint8)
    return np.bitwise_xor(arr, _pad(key, len(arr))).tobytes()


def _kdf(sid: bytes, index: int, a_bytes: bytes, b_bytes: bytes, shared, group: ModpGroup) -> bytes:
    h = hashlib.sha256(b"fedanomaly/simplest-ot")
    h.update(sid)
    h.update(index.to_bytes(4, "big"))
    h.update(a_bytes)
    h.update(b_bytes)
    h.update(group.encode(shared))
    return h.digest()


class _Reader:
    def __init__(self, data):
        self.view = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if n < 0 or self.pos + n > len(self.view):
            raise TranscriptError("truncated OT message")
        out = self.view[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]

    def done(self) -> None:
        if self.pos != len(self.view):
            raise TranscriptError("trailing bytes in OT message")


def _header(sid: bytes, n: int) -> bytes:
    return sid + struct.pack(">I", n)


def _read_header(reader: _Reader, sid: bytes, n: int | None = None) -> int:
    got = bytes(reader.take(SID_BYTES))
    if got != sid:
        raise SessionMismatchError(f"session id mismatch: {got.hex()} != {sid.hex()}")
    count = reader.u32()
    if n is not None and count != n:
        raise TranscriptError(f"expected {n} transfers, got {count}")
    return count


def _check_sid(sid: bytes) -> bytes:
    sid = bytes(sid)
    if len(sid) != SID_BYTES:
        raise ValueError(f"session id must be {SID_BYTES} bytes")
    return sid


class OtSender:
    """Sender side of one OT session carrying ``len(pairs)`` transfers."""

    def __init__(self, sid: bytes, pairs: Sequence[tuple[bytes, bytes]], rng: Csprng,
                 mode: str = "crypto", group: ModpGroup = DEFAULT_GROUP,
                 stats: OtStats | None = None):
        if mode not in MODES:
            raise ValueError(f"unknown OT mode {mode!r}")
        self.sid = _check_sid(sid)
        self.pairs = [(bytes(v0), bytes(v1)) for v0, v1 in pairs]
        for v0, v1 in self.pairs:
            if len(v0) != len(v1):
                raise ValueError("v0 and v1 must have equal length")
        self.mode = mode
        self.group = group
        self.rng = rng
        if stats is not None:
            stats.transfers += len(self.pairs)
            stats.sessions += 1

    def first_message(self) -> bytes:
        parts = [_header(self.sid, len(self.pairs))]
        if self.mode == "ideal":
            for v0, v1 in self.pairs:
                parts += [struct.pack(">I", len(v0)), v0, v1]
            return b"".join(parts)
        self._a = self.group.random_scalar(self.rng)
        self._A = self.group.exp(self.group.g, self._a)
        self._A_bytes = self.group.encode(self._A)
        parts.append(self._A_bytes)
        return b"".join(parts)

    def final_message(self, reply) -> bytes:
        if self.mode != "crypto":
            raise OtError("ideal mode has no second round")
        g = self.group
        reader = _Reader(reply)
        _read_header(reader, self.sid, len(self.pairs))
        # (B / A)^a = B^a * (A^a)^-1
        a_pow_inv = g.inv(g.exp(self._A, self._a))
        parts = [_header(self.sid, len(self.pairs))]
        for i, (v0, v1) in enumerate(self.pairs):
            b_bytes = bytes(reader.take(g.element_bytes))
            B = g.decode(b_bytes)
            k0_shared = g.exp(B, self._a)
            k1_shared = g.mul(k0_shared, a_pow_inv)
            k0 = _kdf(self.sid, i, self._A_bytes, b_bytes, k0_shared, g)
            k1 = _kdf(self.sid, i, self._A_bytes, b_bytes, k1_shared, g)
            parts += [struct.pack(">I", len(v0)), _xor(v0, k0), _xor(v1, k1)]
        reader.done()
        return b"".join(parts)


class OtReceiver:
    """Receiver side; ``outputs`` holds ``v_{b_i}`` once the session completes."""

    def __init__(self, sid: bytes, choices: Sequence[int], rng: Csprng,
                 mode: str = "crypto", group: ModpGroup = DEFAULT_GROUP):
        if mode not in MODES:
            raise ValueError(f"unknown OT mode {mode!r}")
        for b in choices:
            if b not in (0, 1):
                raise ValueError(f"choice bit must be 0 or 1, got {b!r}")
        self.sid = _check_sid(sid)
        self.choices = [int(b) for b in choices]
        self.mode = mode
        self.group = group
        self.rng = rng
        self.outputs: list[bytes] | None = None

    def on_first(self, message) -> bytes | None:
        reader = _Reader(message)
        _read_header(reader, self.sid, len(self.choices))
        if self.mode == "ideal":
            out = []
            for b in self.choices:
                n = reader.u32()
                v0 = reader.take(n)
                v1 = reader.take(n)
                out.append(bytes(v1 if b else v0))
            reader.done()
            self.outputs = out
            return None
        g = self.group
        self._A_bytes = bytes(reader.take(g.element_bytes))
        reader.done()
        A = g.decode(self._A_bytes)
        self._keys = []
        parts = [_header(self.sid, len(self.choices))]
        for i, c in enumerate(self.choices):
            b = g.random_scalar(self.rng)
            B = g.exp(g.g, b)
            if c:
                B = g.mul(A, B)
            b_bytes = g.encode(B)
            self._keys.append(_kdf(self.sid, i, self._A_bytes, b_bytes, g.exp(A, b), g))
            parts.append(b_bytes)
        return b"".join(parts)

    def on_final(self, message) -> None:
        if self.mode != "crypto":
            raise OtError("ideal mode has no final message")
        reader = _Reader(message)
        _read_header(reader, self.sid, len(self.choices))
        out = []
        for c, key in zip(self.choices, self._keys):
            n = reader.u32()
            e0 = reader.take(n)
            e1 = reader.take(n)
            out.append(_xor(e1 if c else e0, key))
        reader.done()
        self.outputs = out


def run_ot(sid: bytes, pairs: Sequence[tuple[bytes, bytes]], choices: Sequence[int],
           sender_rng: Csprng, receiver_rng: Csprng, mode: str = "crypto",
           stats: OtStats | None = None) -> list[bytes]:
    """Run a complete OT session in-process and return the receiver's outputs."""
    sender = OtSender(sid, pairs, sender_rng, mode, stats=stats)
    receiver = OtReceiver(sid, choices, receiver_rng, mode)
    reply = receiver.on_first(sender.first_message())
    if mode == "crypto":
        receiver.on_final(sender.final_message(reply))
    return receiver.outputs


def ot_transfer(sender: OtSenderInput, receiver: OtChoice, mode: str = "crypto",
                rng: Csprng | None = None, stats: OtStats | None = None) -> bytes:
    if sender.sid != receiver.sid:
        raise SessionMismatchError("sender and receiver disagree on the session id")
    rng = rng or Csprng(bytes(32), "ot_transfer", sender.sid)
    return run_ot(sender.sid, [(sender.v0, sender.v1)], [receiver.b],
                  rng.fork("sender"), rng.fork("receiver"), mode, stats)[0]


def ot_masked_select(u0: FixedVector, u1: FixedVector, b: int, rng: Csprng,
                     mode: str = "ideal", sid: bytes = bytes(SID_BYTES),
                     stats: OtStats | None = None) -> tuple[FixedVector, FixedVector]:
    """Share ``u_b`` between sender and receiver without revealing ``b`` or ``u_{1-b}``.

    The sender keeps a uniform mask ``r``; the receiver obtains ``u_b - r``.
    """
    u0._check(u1)
    mask = FixedVector(rng.fork("mask").uint64(u0.shape), u0.fraction_bits)
    m0 = (u0 - mask).to_bytes()
    m1 = (u1 - mask).to_bytes()
    out = run_ot(sid, [(m0, m1)], [b], rng.fork("ot-sender"), rng.fork("ot-receiver"), mode, stats)[0]
    return mask, FixedVector.from_bytes(out, u0.fraction_bits, u0.shape)


@dataclass(frozen=True)
class OtKeyCacheEntry:
    """Cached keys for one account.

    The sender side holds ``k0`` and ``k1``; the receiver side holds ``kb``
    (the key matching its flag bit) and the bit ``choice`` itself.
    """

    account_id: str
    k0: bytes | None = None
    k1: bytes | None = None
    kb: bytes | None = None
    choice: int | None = None

    @property
    def is_sender(self) -> bool:
        return self.k0 is not None


def key_ot_setup(accounts: Sequence[tuple[str, int]], rng: Csprng, mode: str = "crypto",
                 sid: bytes = bytes(SID_BYTES), stats: OtStats | None = None,
                 ) -> tuple[dict[str, OtKeyCacheEntry], dict[str, OtKeyCacheEntry]]:
    """One OT of two fresh keys per account; the receiver learns ``k_flag``."""
    ids = [a for a, _ in accounts]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate account id in key OT setup")
    key_rng = rng.fork("keys")
    pairs = [(key_rng.random_bytes(KEY_BYTES), key_rng.random_bytes(KEY_BYTES)) for _ in ids]
    choices = [int(b) for _, b in accounts]
    got = run_ot(sid, pairs, choices, rng.fork("ot-sender"), rng.fork("ot-receiver"), mode, stats)
    sender_map = {a: OtKeyCacheEntry(a, k0=k0, k1=k1) for a, (k0, k1) in zip(ids, pairs)}
    receiver_map = {a: OtKeyCacheEntry(a, kb=kb, choice=c) for a, kb, c in zip(ids, got, choices)}
    return sender_map, receiver_map


def _aad(sid: bytes, index: int, which: int) -> bytes:
    return sid + index.to_bytes(4, "big") + bytes([which])


def seal_pair(entry: OtKeyCacheEntry, m0: bytes, m1: bytes, nonce: bytes,
              sid: bytes, index: int) -> bytes:
    """Sender side of a cached selection: ``nonce || Enc_k0(m0) || Enc_k1(m1)``."""
    if not entry.is_sender:
        raise OtError("sealing requires the sender-side cache entry")
    if len(m0) != len(m1):
        raise ValueError("m0 and m1 must have equal length")
    c0 = ChaCha20Poly1305(entry.k0).encrypt(nonce, m0, _aad(sid, index, 0))
    c1 = ChaCha20Poly1305(entry.k1).encrypt(nonce, m1, _aad(sid, index, 1))
    return nonce + c0 + c1


def open_pair(entry: OtKeyCacheEntry, sealed, sid: bytes, index: int) -> bytes:
    if entry.kb is None or entry.choice is None:
        raise OtError("opening requires the receiver-side cache entry")
    sealed = bytes(sealed)
    body = len(sealed) - NONCE_BYTES
    if body < 0 or body % 2:
        raise TranscriptError("malformed sealed pair")
    half = body // 2
    nonce = sealed[:NONCE_BYTES]
    start = NONCE_BYTES + entry.choice * half
    try:
        return ChaCha20Poly1305(entry.kb).decrypt(nonce, sealed[start:start + half],
                                                  _aad(sid, index, entry.choice))
    except InvalidTag as exc:
        raise DecryptionError(f"authentication failed for account {entry.account_id}") from exc


def key_select(u0: FixedVector, u1: FixedVector, sender_entry: OtKeyCacheEntry,
               receiver_entry: OtKeyCacheEntry, rng: Csprng, sid: bytes = bytes(SID_BYTES),
               index: int = 0) -> tuple[FixedVector, FixedVector]:
    """Cached-path equivalent of :func:`ot_masked_select`; no OT is run."""
    u0._check(u1)
    mask = FixedVector(rng.fork("mask").uint64(u0.shape), u0.fraction_bits)
    nonce = rng.fork("nonce").random_bytes(NONCE_BYTES)
    sealed = seal_pair(sender_entry, (u0 - mask).to_bytes(), (u1 - mask).to_bytes(), nonce, sid, index)
    got = open_pair(receiver_entry, sealed, sid, index)
    return mask, FixedVector.from_bytes(got, u0.fraction_bits, u0.shape)
