"""Reactive hub, aggregator and bank state machines.

Every party exposes ``start()`` and ``handle(msg)``, each returning an
iterable of ``(destination, ProtocolMessage)``. Parties never block and keep
no ordering assumptions across different senders.

A *selection round* obliviously picks ``u_{i,b_i}`` for a set of rows, where
``b_i`` is the flag bit of row ``i``'s receiver account, held by that
account's bank:

1. the hub encodes both candidates, draws a mask ``r_i`` and offers
   ``u_{i,0} - r_i`` and ``u_{i,1} - r_i`` to the bank through OT
   (ideal, crypto, or sealed under cached keys);
2. the bank obtains ``u_{i,b_i} - r_i``;
3. training: the bank forwards it to the aggregator, which sums the batch,
   adds noise and returns its aggregate share to the hub; inference: the
   bank adds noise and returns the share to the hub directly.

The hub adds its own share (the masks, plus any rows it could compute in
the clear) and decodes.
"""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Generator, Iterable, Sequence

import numpy as np

from ..data import flag_bit
from ..noise import NoiseSpec
from ..ot import (NONCE_BYTES, OtKeyCacheEntry, OtReceiver, OtSender, OtStats,
                  open_pair, seal_pair, KEY_BYTES)
from ..ring import DEFAULT_FRACTION_BITS, decode_array, encode_array
from ..rng import Csprng, derive_seed
from ..transport import (AGGREGATOR, HUB, MAX_PAYLOAD, MsgType, PartyId, ProtocolMessage,
                         bank, pack_payload, u64_array, unpack_payload)

log = logging.getLogger(__name__)

KIND_TRAIN = "train"
KIND_INFER = "infer"
KIND_KEYS = "keys"
OT_MODES = ("ideal", "crypto")
_PAYLOAD_HEADROOM = 1 << 16


class ProtocolError(Exception):
    pass


class UnknownAccountError(ProtocolError, KeyError):
    pass


def _wire(a: np.ndarray) -> np.ndarray:
    """Little-endian contiguous view for framing (no copy on little-endian hosts)."""
    return np.ascontiguousarray(a, dtype="<u8")


def sub_sid(sid: bytes, *labels) -> bytes:
    return derive_seed(sid.ljust(32, b"\0"), *labels)[:16]


def rows_per_chunk(dim: int, keyed: bool = False, max_payload: int = MAX_PAYLOAD,
                   cap: int = 1024) -> int:
    """Largest chunk whose candidate pair fits in one frame."""
    per_row = 2 * 8 * dim + (2 * 16 + NONCE_BYTES + 16 if keyed else 8)
    return max(1, min(cap, (max_payload - _PAYLOAD_HEADROOM) // per_row))


@dataclass
class TrainBatchJob:
    """Hub-side inputs of one oblivious batch selection.

    ``banks[i]``/``accounts[i]`` locate row ``i``'s receiver. Candidate
    updates come either as arrays ``u0``/``u1`` of shape (n, dim) or from
    ``compute(positions) -> (u0_rows, u1_rows)``, which lets large batches be
    produced chunk by chunk. ``plain`` is a part of the sum the hub already
    knows in the clear (rows that need no OT); it never leaves the hub.
    """
    banks: np.ndarray
    accounts: Sequence[str]
    dim: int
    u0: np.ndarray | None = None
    u1: np.ndarray | None = None
    compute: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]] | None = None
    plain: np.ndarray | None = None

    def __post_init__(self):
        self.banks = np.asarray(self.banks, dtype=np.int64).reshape(-1)
        if len(self.accounts) != len(self.banks):
            raise ValueError("banks and accounts differ in length")
        if self.compute is None:
            if self.u0 is None or self.u1 is None:
                raise ValueError("need u0/u1 arrays or a compute callback")
            self.u0 = np.asarray(self.u0, dtype=np.float64).reshape(len(self.banks), self.dim)
            self.u1 = np.asarray(self.u1, dtype=np.float64).reshape(len(self.banks), self.dim)

    def candidates(self, positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.compute is not None:
            return self.compute(positions)
        return self.u0[positions], self.u1[positions]


@dataclass
class SelectionRound:
    sid: bytes
    kind: str
    job: TrainBatchJob


@dataclass
class _RoundState:
    round: SelectionRound
    chunks: dict = field(default_factory=dict)  # (bank, chunk) -> positions
    mask_sum: np.ndarray | None = None
    replies: dict = field(default_factory=dict)  # infer: (bank, chunk) -> (share, skipped)
    expected: int = 0


class Hub:
    """Drives a script of selection rounds.

    ``script`` is a generator yielding :class:`SelectionRound` objects and
    receiving each round's decoded result: the summed update for training
    rounds, the per-row noisy selected value for inference rounds (NaN where
    the bank did not know the account).
    """

    def __init__(self, script: Generator, banks: Iterable[int], rng: Csprng,
                 ot_mode: str = "ideal", key_accounts: dict[int, list[str]] | None = None,
                 fraction_bits: int = DEFAULT_FRACTION_BITS, max_payload: int = MAX_PAYLOAD,
                 chunk_cap: int = 1024, with_aggregator: bool = True):
        if ot_mode not in OT_MODES:
            raise ValueError(f"unknown OT mode {ot_mode!r}")
        self.me = HUB
        self.with_aggregator = with_aggregator
        self.script = script
        self.banks = sorted(banks)
        self.rng = rng
        self.ot_mode = ot_mode
        self.key_accounts = key_accounts
        self.keyed = key_accounts is not None
        self.f = fraction_bits
        self.max_payload = max_payload
        self.chunk_cap = chunk_cap
        self.ot_stats = OtStats()
        self.received = Counter()
        self.rejected = 0
        self.done = False
        self.rounds_completed = 0
        self._keys: dict[tuple[int, str], OtKeyCacheEntry] = {}
        self._key_pending: set[int] = set()
        self._key_senders: dict[int, OtSender] = {}
        self._ot_senders: dict = {}
        self._state: _RoundState | None = None
        self._started = False

    # -- plumbing -----------------------------------------------------------------

    def _msg(self, sid: bytes, mtype: MsgType, meta=None, parts=()) -> ProtocolMessage:
        return ProtocolMessage(sid, self.me, mtype, pack_payload(meta, parts))

    def _mask(self, sid: bytes, b: int, chunk: int, shape) -> np.ndarray:
        return self.rng.fork("mask", sid, b, chunk).uint64(shape)

    # -- key setup -----------------------------------------------------------------

    def _key_sid(self, b: int) -> bytes:
        return sub_sid(derive_seed(self.rng.seed, *self.rng.labels, "key-setup")[:16], b)

    def start(self):
        if self.keyed:
            return self._start_key_setup()
        return self._advance(None)

    def _start_key_setup(self):
        out = []
        for b in self.banks:
            accounts = list(dict.fromkeys(self.key_accounts.get(b, [])))
            key_rng = self.rng.fork("keys", b)
            pairs = [(key_rng.random_bytes(KEY_BYTES), key_rng.random_bytes(KEY_BYTES)) for _ in accounts]
            for acc, (k0, k1) in zip(accounts, pairs):
                self._keys[(b, acc)] = OtKeyCacheEntry(acc, k0=k0, k1=k1)
            sid = self._key_sid(b)
            sender = OtSender(sid, pairs, self.rng.fork("key-ot", b), self.ot_mode, stats=self.ot_stats)
            self._key_senders[b] = sender
            self._key_pending.add(b)
            out.append((bank(b), self._msg(sid, MsgType.OT_MSG1, {"kind": KIND_KEYS, "accounts": accounts},
                                           [sender.first_message()])))
        if not self._key_pending:
            out.extend(self._advance(None))
        return out

    # -- rounds ---------------------------------------------------------------------

    def _advance(self, result):
        """Feed ``result`` to the script and start its next round (or shut down)."""
        try:
            if self._started:
                rnd = self.script.send(result)
            else:
                self._started = True
                rnd = next(self.script)
        except StopIteration:
            self._state = None
            return self._shutdown()
        self._state = _RoundState(rnd)
        return self._round_messages(self._state)

    def _shutdown(self):
        self.done = True
        peers = ([AGGREGATOR] if self.with_aggregator else []) + [bank(b) for b in self.banks]
        sid = bytes(16)
        return [(p, self._msg(sid, MsgType.CONTROL, {"kind": "shutdown"})) for p in peers]

    def _round_messages(self, st: _RoundState):
        rnd, job = st.round, st.round.job
        dim = job.dim
        st.mask_sum = np.zeros(dim, dtype=np.uint64)
        per_chunk = rows_per_chunk(dim, self.keyed, self.max_payload, self.chunk_cap)
        plan = {}
        for b in self.banks:
            pos = np.flatnonzero(job.banks == b)
            plan[b] = [pos[i:i + per_chunk] for i in range(0, len(pos), per_chunk)]
        unknown = set(np.unique(job.banks).tolist()) - set(self.banks)
        if unknown:
            raise ProtocolError(f"rows routed to unregistered banks {sorted(unknown)}")
        st.expected = sum(len(c) for c in plan.values())
        if rnd.kind == KIND_TRAIN:
            if not self.with_aggregator:
                raise ProtocolError("training rounds need an aggregator")
            meta = {"kind": "expect", "dim": dim,
                    "chunks": {str(b): len(plan[b]) for b in self.banks}}
            yield AGGREGATOR, self._msg(rnd.sid, MsgType.CONTROL, meta)
        elif st.expected == 0:
            yield from self._advance(np.zeros(0))
            return
        for b in self.banks:
            for c, positions in enumerate(plan[b]):
                st.chunks[(b, c)] = positions
                yield bank(b), self._chunk_message(st, b, c, positions)

    def _chunk_message(self, st: _RoundState, b: int, c: int, positions: np.ndarray):
        rnd, job = st.round, st.round.job
        u0, u1 = job.candidates(positions)
        n = len(positions)
        e0 = encode_array(np.asarray(u0, dtype=np.float64).reshape(n, job.dim), self.f)
        e1 = encode_array(np.asarray(u1, dtype=np.float64).reshape(n, job.dim), self.f)
        mask = self._mask(rnd.sid, b, c, (n, job.dim))
        st.mask_sum += mask.sum(axis=0, dtype=np.uint64)
        m0 = e0 - mask
        m1 = e1 - mask
        del e0, e1, mask
        accounts = [job.accounts[i] for i in positions]
        meta = {"kind": rnd.kind, "chunk": c, "accounts": accounts, "dim": job.dim}
        mtype = MsgType.MASKED_PAIR if rnd.kind == KIND_TRAIN else MsgType.INFER_REQUEST
        if self.keyed:
            ot_sid = sub_sid(rnd.sid, b, c)
            nonce_rng = self.rng.fork("nonce", rnd.sid, b, c)
            parts = []
            for i, acc in enumerate(accounts):
                entry = self._keys.get((b, acc))
                if entry is None:
                    raise ProtocolError(f"no cached keys for account {acc} at bank {b}")
                parts.append(seal_pair(entry, _wire(m0[i]).tobytes(), _wire(m1[i]).tobytes(),
                                       nonce_rng.random_bytes(NONCE_BYTES), ot_sid, i))
            meta["keyed"] = True
            return self._msg(rnd.sid, mtype, meta, parts)
        if self.ot_mode == "ideal":
            self.ot_stats.transfers += n
            self.ot_stats.sessions += 1
            return self._msg(rnd.sid, mtype, meta, [_wire(m0), _wire(m1)])
        ot_sid = sub_sid(rnd.sid, b, c)
        pairs = [(_wire(m0[i]).tobytes(), _wire(m1[i]).tobytes()) for i in range(n)]
        sender = OtSender(ot_sid, pairs, self.rng.fork("ot", rnd.sid, b, c), "crypto", stats=self.ot_stats)
        self._ot_senders[(rnd.sid, b, c)] = sender
        return self._msg(rnd.sid, MsgType.OT_MSG1, meta, [sender.first_message()])

    # -- inbox -----------------------------------------------------------------------

    def handle(self, msg: ProtocolMessage):
        self.received[msg.type] += 1
        meta, parts = unpack_payload(msg.payload)
        src = msg.sender
        if msg.type == MsgType.OT_MSG2 and meta.get("kind") == KIND_KEYS:
            sender = self._key_senders.get(src.index)
            if sender is None or msg.sid != sender.sid:
                return self._reject(msg, "unexpected key OT reply")
            return [(src, self._msg(msg.sid, MsgType.OT_MSG3, {"kind": KIND_KEYS},
                                    [sender.final_message(parts[0])]))]
        if msg.type == MsgType.CONTROL and meta.get("kind") == "keys-ready":
            if src.index not in self._key_pending:
                return self._reject(msg, "duplicate keys-ready")
            self._key_pending.discard(src.index)
            self._key_senders.pop(src.index, None)
            if not self._key_pending:
                return self._advance(None)
            return []
        st = self._state
        if st is None or msg.sid != st.round.sid:
            return self._reject(msg, "message for an unknown or finished round")
        if msg.type == MsgType.OT_MSG2:
            key = (msg.sid, src.index, int(meta["chunk"]))
            sender = self._ot_senders.pop(key, None)
            if sender is None:
                return self._reject(msg, "unexpected OT reply")
            return [(src, self._msg(msg.sid, MsgType.OT_MSG3, {"kind": meta.get("kind"), "chunk": key[2]},
                                    [sender.final_message(parts[0])]))]
        if msg.type == MsgType.AGGREGATE_SHARE and st.round.kind == KIND_TRAIN:
            return self._finish_train(st, meta, parts)
        if msg.type == MsgType.INFER_SHARE and st.round.kind == KIND_INFER:
            key = (src.index, int(meta["chunk"]))
            if key not in st.chunks or key in st.replies:
                return self._reject(msg, "unexpected inference share")
            st.replies[key] = (u64_array(parts[0]), meta.get("skipped", []))
            if len(st.replies) == st.expected:
                return self._finish_infer(st)
            return []
        return self._reject(msg, f"unexpected {msg.type.name}")

    def _reject(self, msg, why):
        self.rejected += 1
        log.warning("hub dropped %s from %s: %s", msg.type.name, msg.sender, why)
        return []

    def _finish_train(self, st: _RoundState, meta, parts):
        job = st.round.job
        total = u64_array(parts[0]).copy()
        if total.shape != (job.dim,):
            raise ProtocolError("aggregate share has the wrong dimension")
        total += st.mask_sum
        for key, rows in meta.get("skipped", {}).items():
            b, c = (int(v) for v in key.split(":"))
            positions = st.chunks[(b, c)]
            mask = self._mask(st.round.sid, b, c, (len(positions), job.dim))
            total -= mask[rows].sum(axis=0, dtype=np.uint64)
        u = decode_array(total, self.f)
        if job.plain is not None:
            u = u + job.plain
        self.rounds_completed += 1
        return self._advance(u)

    def _finish_infer(self, st: _RoundState):
        job = st.round.job
        out = np.full(len(job.banks), np.nan)
        for (b, c), positions in st.chunks.items():
            share, skipped = st.replies[(b, c)]
            mask = self._mask(st.round.sid, b, c, (len(positions), job.dim))
            vals = decode_array((share.reshape(len(positions), job.dim) + mask)[:, 0], self.f)
            vals[list(skipped)] = np.nan
            out[positions] = vals
        self.rounds_completed += 1
        return self._advance(out)


class Bank:
    """Holds its accounts' flags and answers selection requests.

    During training the selected share goes to the aggregator; during
    inference the bank adds its noise and returns the share to the hub.
    """

    def __init__(self, index: int, accounts: dict[str, int], rng: Csprng,
                 infer_noise: NoiseSpec = NoiseSpec(), ot_mode: str = "ideal",
                 fraction_bits: int = DEFAULT_FRACTION_BITS):
        self.index = index
        self.me = bank(index)
        self.flags = {a: flag_bit(f) for a, f in accounts.items()}
        self.rng = rng
        self.infer_noise = infer_noise
        self.ot_mode = ot_mode
        self.f = fraction_bits
        self.done = False
        self.queries = Counter()  # kind -> rows queried
        self.accounts_queried = Counter()
        self.skipped = 0
        self.rejected = 0
        self.key_setup_accounts = 0
        self._keys: dict[str, OtKeyCacheEntry] = {}
        self._receivers: dict = {}
        self._seen: set = set()

    def start(self):
        return []

    def _msg(self, sid, mtype, meta=None, parts=()):
        return ProtocolMessage(sid, self.me, mtype, pack_payload(meta, parts))

    def _choices(self, accounts):
        choices, skipped = [], []
        for i, acc in enumerate(accounts):
            b = self.flags.get(acc)
            if b is None:
                skipped.append(i)
                b = 0
            choices.append(b)
        return choices, skipped

    def handle(self, msg: ProtocolMessage):
        meta, parts = unpack_payload(msg.payload)
        kind = meta.get("kind")
        if msg.type == MsgType.CONTROL and kind == "shutdown":
            self.done = True
            return []
        if msg.sender != HUB:
            self.rejected += 1
            log.warning("bank %d dropped %s from %s", self.index, msg.type.name, msg.sender)
            return []
        if kind == KIND_KEYS:
            return self._handle_keys(msg, meta, parts)
        chunk = meta.get("chunk")
        if msg.type in (MsgType.MASKED_PAIR, MsgType.INFER_REQUEST, MsgType.OT_MSG1):
            key = (msg.sid, kind, chunk)
            if key in self._seen:
                self.rejected += 1
                log.warning("bank %d rejected replayed chunk %s", self.index, chunk)
                return []
            self._seen.add(key)
        accounts = meta.get("accounts", [])
        if msg.type == MsgType.OT_MSG1:
            choices, skipped = self._choices(accounts)
            recv = OtReceiver(sub_sid(msg.sid, self.index, chunk), choices,
                              self.rng.fork("ot", msg.sid, chunk), "crypto")
            self._receivers[(msg.sid, chunk)] = (recv, accounts, skipped, meta)
            return [(HUB, self._msg(msg.sid, MsgType.OT_MSG2, {"kind": kind, "chunk": chunk},
                                    [recv.on_first(parts[0])]))]
        if msg.type == MsgType.OT_MSG3:
            entry = self._receivers.pop((msg.sid, chunk), None)
            if entry is None:
                self.rejected += 1
                return []
            recv, accounts, skipped, meta0 = entry
            recv.on_final(parts[0])
            rows = np.stack([np.frombuffer(o, dtype="<u8") for o in recv.outputs]) if recv.outputs \
                else np.zeros((0, meta0["dim"]), dtype=np.uint64)
            return self._deliver(msg.sid, kind, chunk, accounts, rows.astype(np.uint64), skipped, meta0["dim"])
        if msg.type in (MsgType.MASKED_PAIR, MsgType.INFER_REQUEST):
            dim = int(meta["dim"])
            n = len(accounts)
            if meta.get("keyed"):
                ot_sid = sub_sid(msg.sid, self.index, chunk)
                rows = np.zeros((n, dim), dtype=np.uint64)
                skipped = []
                for i, acc in enumerate(accounts):
                    entry = self._keys.get(acc)
                    if entry is None:
                        skipped.append(i)
                        continue
                    rows[i] = np.frombuffer(open_pair(entry, parts[i], ot_sid, i), dtype="<u8")
            else:
                choices, skipped = self._choices(accounts)
                m0 = u64_array(parts[0]).reshape(n, dim)
                m1 = u64_array(parts[1]).reshape(n, dim)
                pick = np.asarray(choices, dtype=bool)
                rows = np.where(pick[:, None], m1, m0)
            return self._deliver(msg.sid, kind, chunk, accounts, rows, skipped, dim)
        self.rejected += 1
        log.warning("bank %d dropped unexpected %s", self.index, msg.type.name)
        return []

    def _deliver(self, sid, kind, chunk, accounts, rows, skipped, dim):
        if skipped:
            rows = rows.copy()
            rows[skipped] = 0
            self.skipped += len(skipped)
            log.warning("bank %d: %d unknown account(s) skipped in chunk %s", self.index, len(skipped), chunk)
        self.queries[kind] += len(accounts)
        for i, acc in enumerate(accounts):
            self.accounts_queried[acc] += 1
        meta = {"chunk": chunk, "rows": len(accounts), "skipped": list(skipped)}
        if kind == KIND_TRAIN:
            return [(AGGREGATOR, self._msg(sid, MsgType.SHARE_FORWARD, meta,
                                           [_wire(rows)]))]
        if self.infer_noise.active:
            noise = self.infer_noise.sample(self.rng.fork("infer-noise", sid, chunk), rows.shape)
            rows = rows + encode_array(noise, self.f)
        return [(HUB, self._msg(sid, MsgType.INFER_SHARE, meta, [_wire(rows)]))]

    def _handle_keys(self, msg, meta, parts):
        accounts = meta.get("accounts")
        if msg.type == MsgType.OT_MSG1:
            if (msg.sid, KIND_KEYS) in self._seen:
                self.rejected += 1
                return []
            self._seen.add((msg.sid, KIND_KEYS))
            choices, skipped = self._choices(accounts)
            recv = OtReceiver(msg.sid, choices, self.rng.fork("key-ot"), self.ot_mode)
            reply = recv.on_first(parts[0])
            self._receivers[(msg.sid, KIND_KEYS)] = (recv, accounts, skipped)
            self.key_setup_accounts += len(accounts)
            if reply is not None:
                return [(HUB, self._msg(msg.sid, MsgType.OT_MSG2, {"kind": KIND_KEYS}, [reply]))]
            return self._keys_ready(msg.sid)
        if msg.type == MsgType.OT_MSG3:
            entry = self._receivers.get((msg.sid, KIND_KEYS))
            if entry is None:
                self.rejected += 1
                return []
            entry[0].on_final(parts[0])
            return self._keys_ready(msg.sid)
        self.rejected += 1
        return []

    def _keys_ready(self, sid):
        recv, accounts, skipped = self._receivers.pop((sid, KIND_KEYS))
        missing = set(skipped)
        for i, (acc, kb, c) in enumerate(zip(accounts, recv.outputs, recv.choices)):
            if i not in missing:
                self._keys[acc] = OtKeyCacheEntry(acc, kb=kb, choice=c)
        return [(HUB, self._msg(sid, MsgType.CONTROL, {"kind": "keys-ready"}))]


@dataclass
class _Pending:
    total: np.ndarray | None = None
    expected: dict | None = None
    got: set = field(default_factory=set)
    skipped: dict = field(default_factory=dict)


class Aggregator:
    """Sums the banks' forwarded shares of a batch and adds noise.

    Noise of width ``noise.param * noise_scale`` is sampled in real units,
    encoded and added to the aggregator's own aggregate share.
    """

    def __init__(self, rng: Csprng, noise: NoiseSpec = NoiseSpec(), noise_scale: float = 1.0,
                 fraction_bits: int = DEFAULT_FRACTION_BITS):
        self.me = AGGREGATOR
        self.rng = rng
        self.noise = noise
        self.noise_scale = noise_scale
        self.f = fraction_bits
        self.done = False
        self.observations = Counter()  # receiver bank index -> rows forwarded
        self.batches = 0
        self.rejected = 0
        self._pending: dict[bytes, _Pending] = {}
        self._completed: set[bytes] = set()

    def start(self):
        return []

    def _reject(self, msg, why):
        self.rejected += 1
        log.warning("aggregator dropped %s from %s: %s", msg.type.name, msg.sender, why)
        return []

    def handle(self, msg: ProtocolMessage):
        meta, parts = unpack_payload(msg.payload)
        if msg.type == MsgType.CONTROL and meta.get("kind") == "shutdown":
            self.done = True
            return []
        if msg.sid in self._completed:
            return self._reject(msg, "replay of a completed batch")
        st = self._pending.setdefault(msg.sid, _Pending())
        if msg.type == MsgType.CONTROL and meta.get("kind") == "expect":
            if msg.sender != HUB or st.expected is not None:
                return self._reject(msg, "bad expect")
            st.expected = {int(b): int(n) for b, n in meta["chunks"].items()}
            if st.total is None:
                st.total = np.zeros(int(meta["dim"]), dtype=np.uint64)
            elif len(st.total) != int(meta["dim"]):
                raise ValueError("forwarded shares disagree with the announced dimension")
        elif msg.type == MsgType.SHARE_FORWARD and msg.sender.role.name == "BANK":
            b, c = msg.sender.index, int(meta["chunk"])
            if (b, c) in st.got:
                return self._reject(msg, "duplicate share")
            if st.expected is not None and c >= st.expected.get(b, 0):
                return self._reject(msg, "share outside the announced chunks")
            rows = int(meta["rows"])
            share = u64_array(parts[0])
            if rows:
                share = share.reshape(rows, -1).sum(axis=0, dtype=np.uint64)
            else:
                share = None
            if share is not None:
                if st.total is None:
                    st.total = share.copy()
                else:
                    st.total += share
            st.got.add((b, c))
            self.observations[b] += rows
            if meta.get("skipped"):
                st.skipped[f"{b}:{c}"] = list(meta["skipped"])
        else:
            return self._reject(msg, f"unexpected {msg.type.name}")
        if st.expected is not None and len(st.got) == sum(st.expected.values()):
            return self._finish(msg.sid, st)
        return []

    def _finish(self, sid: bytes, st: _Pending):
        del self._pending[sid]
        self._completed.add(sid)
        total = st.total
        if self.noise.active:
            noise = self.noise.sample(self.rng.fork("noise", sid), total.shape, scale=self.noise_scale)
            total = total + encode_array(noise, self.f)
        self.batches += 1
        meta = {"skipped": st.skipped}
        return [(HUB, ProtocolMessage(sid, self.me, MsgType.AGGREGATE_SHARE,
                                      pack_payload(meta, [_wire(total)])))]
