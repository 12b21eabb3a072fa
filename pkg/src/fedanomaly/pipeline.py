"""Dataset preparation shared by the CLI, the sweeps and the tests.

Transactions are split by time (the latest ``test_fraction`` become the test
set), features use the whole history causally, the normalizer is fit on the
training split only, and anomalous training rows can be upsampled.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from .config import ConfigError
from .data import AccountRecord, TransactionRecord, check_receivers, flag_bit, upsample_indices
from .features import HistoryStore, Normalizer, extract_all
from .rng import Csprng


@dataclass
class PipelineConfig:
    test_fraction: float = 0.2
    upsample_ratio: float = 0.0  # anomalous per normal after upsampling; 0 disables
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.test_fraction < 1:
            raise ConfigError("test_fraction must lie in [0, 1)")
        if self.upsample_ratio < 0:
            raise ConfigError("upsample_ratio must be >= 0")

    @classmethod
    def from_mapping(cls, values: dict) -> PipelineConfig:
        names = {f.name for f in fields(cls)}
        unknown = set(values) - names
        if unknown:
            raise ConfigError(f"unknown pipeline keys: {sorted(unknown)}")
        return cls(**values)


@dataclass
class Split:
    x: np.ndarray          # normalized features
    labels: np.ndarray
    flags: np.ndarray      # receiver flag bits (ground truth; only banks hold these)
    banks: np.ndarray      # receiver bank index
    accounts: list[str]    # receiver account id
    tx_ids: list[str]

    def take(self, idx) -> Split:
        idx = np.asarray(idx, dtype=np.int64)
        return Split(self.x[idx], self.labels[idx], self.flags[idx], self.banks[idx],
                     [self.accounts[i] for i in idx], [self.tx_ids[i] for i in idx])

    def __len__(self):
        return len(self.labels)


@dataclass
class Prepared:
    train: Split
    test: Split
    normalizer: Normalizer
    bank_names: list[str]
    bank_accounts: dict[int, dict[str, int]]


def bank_tables(accounts: Sequence[AccountRecord]) -> tuple[list[str], dict[int, dict[str, int]]]:
    names = sorted({a.bank_id for a in accounts})
    index = {b: i for i, b in enumerate(names)}
    tables: dict[int, dict[str, int]] = {i: {} for i in range(len(names))}
    for a in accounts:
        tables[index[a.bank_id]][a.account_id] = a.flag
    return names, tables


def prepare(txs: Sequence[TransactionRecord], accounts: Sequence[AccountRecord],
            cfg: PipelineConfig | None = None, rates=None) -> Prepared:
    cfg = cfg or PipelineConfig()
    names, tables = bank_tables(accounts)
    check_receivers(txs, names)
    index = {b: i for i, b in enumerate(names)}
    order = sorted(range(len(txs)), key=lambda i: (txs[i].timestamp, i))
    txs = [txs[i] for i in order]
    raw = extract_all(txs, HistoryStore.build(txs, rates))
    labels = np.array([t.label if t.label is not None else 0 for t in txs], dtype=np.float64)
    banks = np.array([index[t.receiver_bank] for t in txs], dtype=np.int64)
    flags = np.array([flag_bit(tables[index[t.receiver_bank]].get(t.receiver_account, 0)) for t in txs],
                     dtype=np.float64)
    n_test = int(round(cfg.test_fraction * len(txs)))
    n_train = len(txs) - n_test
    norm = Normalizer.fit(raw[:n_train])
    full = Split(norm.transform(raw), labels, flags, banks, [t.receiver_account for t in txs],
                 [t.tx_id for t in txs])
    train = full.take(np.arange(n_train))
    test = full.take(np.arange(n_train, len(txs)))
    if cfg.upsample_ratio > 0:
        train = train.take(upsample_indices(train.labels, cfg.upsample_ratio, Csprng(cfg.seed, "upsample")))
    return Prepared(train, test, norm, names, tables)
