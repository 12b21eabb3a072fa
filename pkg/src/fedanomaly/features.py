"""Velocity features over sender, receiver and sender-receiver histories.

Feature order (all amounts in USD, windows use strictly earlier timestamps,
an empty window yields 0):

     0  amount
     1  sender_avg_28d        2  sender_max_28d
     3  receiver_avg_28d      4  receiver_max_28d
     5  pair_avg_28d          6  pair_max_28d
     7  sender_avg_last20     8  sender_min_last20     9  sender_max_last20
    10  receiver_avg_last20  11  receiver_min_last20  12  receiver_max_last20
    13  pair_avg_last20      14  pair_min_last20      15  pair_max_last20
    16  pair_count_7d

"receiver" history means transactions *into* the receiving account.
"""
from __future__ import annotations

import struct
from bisect import bisect_left
from dataclasses import dataclass
from itertools import accumulate
from typing import Iterable, Sequence

import numpy as np

from .data import DAY, TransactionRecord, load_rates, to_usd

FEATURE_NAMES = (
    "amount",
    "sender_avg_28d", "sender_max_28d",
    "receiver_avg_28d", "receiver_max_28d",
    "pair_avg_28d", "pair_max_28d",
    "sender_avg_last20", "sender_min_last20", "sender_max_last20",
    "receiver_avg_last20", "receiver_min_last20", "receiver_max_last20",
    "pair_avg_last20", "pair_min_last20", "pair_max_last20",
    "pair_count_7d",
)
N_FEATURES = len(FEATURE_NAMES)
LONG_WINDOW = 28 * DAY
SHORT_WINDOW = 7 * DAY
LAST_N = 20
SCOPES = ("sender", "receiver", "pair")


def _scope_key(tx: TransactionRecord, scope: str):
    if scope == "sender":
        return (tx.sender_bank, tx.sender_account)
    if scope == "receiver":
        return (tx.receiver_bank, tx.receiver_account)
    return (tx.sender_bank, tx.sender_account, tx.receiver_bank, tx.receiver_account)


class _Series:
    __slots__ = ("times", "amounts", "_prefix")

    def __init__(self):
        self.times: list[int] = []
        self.amounts: list[float] = []
        self._prefix: list[float] | None = None

    def prefix(self) -> list[float]:
        if self._prefix is None or len(self._prefix) != len(self.amounts) + 1:
            self._prefix = [0.0, *accumulate(self.amounts)]
        return self._prefix


class HistoryStore:
    """Per-key time-sorted amount histories.

    Queries only look at entries strictly before the query timestamp, so a
    store holding the whole dataset can be shared by every extraction.
    """

    def __init__(self, rates: dict[str, float] | None = None):
        self.rates = rates if rates is not None else load_rates()
        self._series = {scope: {} for scope in SCOPES}

    def add(self, tx: TransactionRecord) -> None:
        usd = to_usd(tx.amount, tx.currency, self.rates)
        for scope in SCOPES:
            s = self._series[scope].setdefault(_scope_key(tx, scope), _Series())
            pos = len(s.times)
            if pos and s.times[-1] > tx.timestamp:
                pos = bisect_left(s.times, tx.timestamp + 1)
            s.times.insert(pos, tx.timestamp)
            s.amounts.insert(pos, usd)
            s._prefix = None

    def extend(self, txs: Iterable[TransactionRecord]) -> None:
        for tx in txs:
            self.add(tx)

    @classmethod
    def build(cls, txs: Iterable[TransactionRecord], rates=None) -> HistoryStore:
        store = cls(rates)
        store.extend(sorted(txs, key=lambda t: t.timestamp))
        return store

    def window(self, scope: str, key, before: int, span: int | None = None,
               last: int | None = None) -> list[float]:
        s = self._series[scope].get(key)
        if s is None:
            return []
        hi = bisect_left(s.times, before)
        lo = 0
        if span is not None:
            lo = bisect_left(s.times, before - span, 0, hi)
        if last is not None:
            lo = max(lo, hi - last)
        return s.amounts[lo:hi]

    def _long_stats(self, scope: str, key, before: int) -> tuple[float, float]:
        s = self._series[scope].get(key)
        if s is None:
            return 0.0, 0.0
        hi = bisect_left(s.times, before)
        lo = bisect_left(s.times, before - LONG_WINDOW, 0, hi)
        if hi == lo:
            return 0.0, 0.0
        p = s.prefix()
        return (p[hi] - p[lo]) / (hi - lo), max(s.amounts[lo:hi])

    def _count(self, scope: str, key, before: int, span: int) -> int:
        s = self._series[scope].get(key)
        if s is None:
            return 0
        hi = bisect_left(s.times, before)
        return hi - bisect_left(s.times, before - span, 0, hi)


def _avg_min_max(values: Sequence[float]) -> tuple[float, float, float]:
    if not values:
        return 0.0, 0.0, 0.0
    return sum(values) / len(values), min(values), max(values)


def extract_features(tx: TransactionRecord, history: HistoryStore) -> np.ndarray:
    t = tx.timestamp
    out = [to_usd(tx.amount, tx.currency, history.rates)]
    keys = {scope: _scope_key(tx, scope) for scope in SCOPES}
    for scope in SCOPES:
        out.extend(history._long_stats(scope, keys[scope], t))
    for scope in SCOPES:
        out.extend(_avg_min_max(history.window(scope, keys[scope], t, last=LAST_N)))
    out.append(float(history._count("pair", keys["pair"], t, SHORT_WINDOW)))
    return np.asarray(out, dtype=np.float64)


def extract_all(txs: Sequence[TransactionRecord], history: HistoryStore | None = None,
                rates=None) -> np.ndarray:
    """Feature matrix (n, 17) in input order. The history defaults to ``txs`` itself."""
    if history is None:
        history = HistoryStore.build(txs, rates)
    out = np.empty((len(txs), N_FEATURES))
    for i, tx in enumerate(txs):
        out[i] = extract_features(tx, history)
    return out


@dataclass
class Normalizer:
    """z-score of log1p(x) with statistics from the training split.

    Every feature is a non-negative amount or count, so ``log1p`` tames the
    heavy tails and maps the empty-window sentinel 0 to 0 before scaling.
    """
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> Normalizer:
        z = np.log1p(np.asarray(x, dtype=np.float64))
        mean = z.mean(axis=0)
        std = z.std(axis=0)
        # constant columns can leave rounding residue instead of an exact zero
        std = np.where(np.ptp(z, axis=0) > 0, std, 1.0)
        return cls(mean, std)

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if np.any(x < 0) or not np.all(np.isfinite(x)):
            raise ValueError("features must be finite and non-negative")
        return (np.log1p(x) - self.mean) / self.std

    def to_bytes(self) -> bytes:
        n = len(self.mean)
        return struct.pack("<I", n) + self.mean.astype("<f8").tobytes() + self.std.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> Normalizer:
        (n,) = struct.unpack_from("<I", data)
        arr = np.frombuffer(data, dtype="<f8", offset=4, count=2 * n).astype(np.float64)
        return cls(arr[:n].copy(), arr[n:].copy())
