"""Hub and bank tables, CSV I/O, a synthetic generator and anomaly upsampling.

The hub sees every transaction field except account flags; each bank holds
its own accounts including the private ``flag`` (0 = normal, 1..12 = one of
the abnormal statuses). The protocol only ever uses ``flag != 0``.

Synthetic data model (all draws from one seeded generator):

* flagged accounts (``flag_prevalence`` of all accounts) never send;
* a normal transaction goes from a sender to one of its regular payees
  (probability 0.8) or to a uniformly random eligible receiver;
* an anomalous transaction goes to a flagged account with probability
  ``flag_correlation`` and otherwise to a uniformly random eligible
  receiver; it usually carries an inflated amount;
* ``normal_to_flagged`` decides whether flagged accounts are eligible
  receivers of ordinary traffic. When false, every normal transaction has a
  flag-0 receiver, which is the property OT reduction relies on.
"""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, fields
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import ConfigError, load_kv, parse_kv
from .rng import Csprng

N_FLAG_STATUSES = 13
EPOCH_START = 1_672_531_200  # 2023-01-01T00:00:00Z
DAY = 86_400

TX_FIELDS = ("tx_id", "sender_name", "sender_account", "sender_bank", "sender_street",
             "sender_zip", "receiver_name", "receiver_account", "receiver_bank", "amount",
             "currency", "timestamp", "label")
ACCOUNT_FIELDS = ("bank_id", "account_id", "name", "street", "zip", "flag")

_FIRST = ("Alice", "Bob", "Carol", "Dmitri", "Elena", "Farid", "Grace", "Hiro", "Ines",
          "Jonas", "Kemi", "Luca", "Mei", "Nadia", "Omar", "Priya", "Quinn", "Rosa")
_LAST = ("Smith", "Okafor", "Garcia", "Chen", "Muller", "Rossi", "Tanaka", "Novak",
         "Silva", "Haddad", "Kowalski", "Dubois", "Larsen", "Ivanova")
_STREETS = ("Main St", "Oak St", "High St", "Park Ave", "Mill Rd", "Church Ln",
            "Station Rd", "Elm St", "Bridge St", "King St")


class DataError(ValueError):
    pass


class UnknownCurrencyError(DataError, KeyError):
    pass


@dataclass(frozen=True)
class TransactionRecord:
    tx_id: str
    sender_name: str
    sender_account: str
    sender_bank: str
    sender_street: str
    sender_zip: str
    receiver_name: str
    receiver_account: str
    receiver_bank: str
    amount: float
    currency: str
    timestamp: int
    label: int | None = None

    def __post_init__(self):
        if not self.amount > 0:
            raise DataError(f"{self.tx_id}: amount must be positive, got {self.amount}")
        if self.label not in (None, 0, 1):
            raise DataError(f"{self.tx_id}: label must be 0 or 1")


@dataclass(frozen=True)
class AccountRecord:
    bank_id: str
    account_id: str
    name: str
    street: str
    zip: str
    flag: int

    def __post_init__(self):
        if not 0 <= self.flag < N_FLAG_STATUSES:
            raise DataError(f"{self.account_id}: flag {self.flag} outside 0..{N_FLAG_STATUSES - 1}")

    @property
    def flag_bit(self) -> int:
        return flag_bit(self.flag)


def flag_bit(flag: int) -> int:
    """Normal (0) versus any abnormal status (1)."""
    return int(flag != 0)


@dataclass
class DatasetConfig:
    n_transactions: int = 10_000
    n_accounts: int = 1_000
    n_banks: int = 4
    anomaly_rate: float = 1e-3
    flag_correlation: float = 0.9
    flag_prevalence: float = 0.02
    normal_to_flagged: bool = True
    anomaly_amount_boost: float = 0.6
    days: int = 90
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.anomaly_rate < 1:
            raise ConfigError("anomaly_rate must lie in (0, 1)")
        if not 0 <= self.flag_correlation <= 1:
            raise ConfigError("flag_correlation must lie in [0, 1]")
        if not 0 <= self.flag_prevalence < 1:
            raise ConfigError("flag_prevalence must lie in [0, 1)")
        if self.n_banks < 1:
            raise ConfigError("n_banks must be at least 1")
        if self.n_accounts < 2 or self.n_transactions < 1:
            raise ConfigError("need at least 2 accounts and 1 transaction")

    @classmethod
    def from_mapping(cls, values: dict) -> DatasetConfig:
        names = {f.name for f in fields(cls)}
        unknown = set(values) - names
        if unknown:
            raise ConfigError(f"unknown dataset config keys: {sorted(unknown)}")
        return cls(**values)

    @classmethod
    def load(cls, path: str | Path) -> DatasetConfig:
        return cls.from_mapping(load_kv(path))


def load_rates(path: str | Path | None = None) -> dict[str, float]:
    if path is None:
        text = resources.files("fedanomaly.resources").joinpath("rates.toml").read_text()
        values = parse_kv(text)
    else:
        values = load_kv(path)
    rates = {}
    for code, rate in values.items():
        if not isinstance(rate, (int, float)) or rate <= 0:
            raise ConfigError(f"bad rate for {code!r}: {rate!r}")
        rates[code.upper()] = float(rate)
    return rates


def to_usd(amount: float, currency: str, rates: dict[str, float]) -> float:
    try:
        return amount * rates[currency]
    except KeyError:
        raise UnknownCurrencyError(f"unknown currency code {currency!r}") from None


def generate_synthetic(cfg: DatasetConfig, rates: dict[str, float] | None = None,
                       ) -> tuple[list[TransactionRecord], list[AccountRecord]]:
    rates = rates or load_rates()
    rng = Csprng(cfg.seed, "dataset").numpy_generator()
    n_acc = cfg.n_accounts
    banks = [f"BANK{i:02d}" for i in range(cfg.n_banks)]

    bank_of = rng.integers(0, cfg.n_banks, size=n_acc)
    bank_of[: cfg.n_banks] = np.arange(min(cfg.n_banks, n_acc))
    n_flagged = int(round(cfg.flag_prevalence * n_acc))
    if cfg.flag_prevalence > 0:
        n_flagged = min(max(n_flagged, 1), n_acc - 2)
    flags = np.zeros(n_acc, dtype=np.int64)
    flagged = rng.choice(n_acc, size=n_flagged, replace=False) if n_flagged else np.array([], dtype=np.int64)
    flags[flagged] = rng.integers(1, N_FLAG_STATUSES, size=n_flagged)

    accounts = []
    for a in range(n_acc):
        accounts.append(AccountRecord(
            bank_id=banks[bank_of[a]],
            account_id=f"AC{a:07d}",
            name=f"{_FIRST[rng.integers(len(_FIRST))]} {_LAST[rng.integers(len(_LAST))]}",
            street=f"{rng.integers(1, 400)} {_STREETS[rng.integers(len(_STREETS))]}",
            zip=f"{rng.integers(10000, 99999):05d}",
            flag=int(flags[a]),
        ))

    normal_idx = np.flatnonzero(flags == 0)
    flagged_idx = np.flatnonzero(flags != 0)
    eligible = np.arange(n_acc) if cfg.normal_to_flagged else normal_idx

    currencies = sorted(rates)
    home_currency = [currencies[i] for i in rng.integers(0, len(currencies), size=n_acc)]
    scale_usd = rng.lognormal(mean=5.0, sigma=1.0, size=n_acc)
    activity = rng.lognormal(mean=0.0, sigma=1.0, size=len(normal_idx))
    activity /= activity.sum()
    payees = rng.choice(eligible, size=(n_acc, 5))

    n = cfg.n_transactions
    times = np.sort(rng.integers(0, cfg.days * DAY, size=n)) + EPOCH_START
    labels = (rng.random(n) < cfg.anomaly_rate).astype(np.int64)
    senders = rng.choice(normal_idx, size=n, p=activity)
    use_payee = rng.random(n) < 0.8
    payee_slot = rng.integers(0, 5, size=n)
    random_recv = rng.choice(eligible, size=n)
    to_flagged = rng.random(n) < cfg.flag_correlation
    flagged_pick = rng.choice(flagged_idx, size=n) if len(flagged_idx) else np.full(n, -1)
    boost = rng.random(n) < cfg.anomaly_amount_boost
    base = rng.lognormal(0.0, 0.5, size=n)
    inflated = rng.lognormal(np.log(6.0), 0.5, size=n)

    txs = []
    for i in range(n):
        s = int(senders[i])
        if labels[i] and to_flagged[i] and flagged_pick[i] >= 0:
            r = int(flagged_pick[i])
        elif labels[i]:
            r = int(random_recv[i])
        else:
            r = int(payees[s, payee_slot[i]]) if use_payee[i] else int(random_recv[i])
        if r == s:
            r = int(eligible[(np.searchsorted(eligible, s) + 1) % len(eligible)])
        usd = scale_usd[s] * (inflated[i] if labels[i] and boost[i] else base[i])
        cur = home_currency[s]
        amount = max(round(usd / rates[cur], 2), 0.01)
        sa, ra = accounts[s], accounts[r]
        txs.append(TransactionRecord(
            tx_id=f"TX{i:08d}",
            sender_name=sa.name, sender_account=sa.account_id, sender_bank=sa.bank_id,
            sender_street=sa.street, sender_zip=sa.zip,
            receiver_name=ra.name, receiver_account=ra.account_id, receiver_bank=ra.bank_id,
            amount=amount, currency=cur, timestamp=int(times[i]), label=int(labels[i]),
        ))
    return txs, accounts


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.2f}"
    return str(value)


def write_transactions(rows: Iterable[TransactionRecord], path_or_buf) -> None:
    _write(path_or_buf, TX_FIELDS, ([_fmt(getattr(r, f)) for f in TX_FIELDS] for r in rows))


def write_accounts(rows: Iterable[AccountRecord], path_or_buf) -> None:
    _write(path_or_buf, ACCOUNT_FIELDS, ([_fmt(getattr(r, f)) for f in ACCOUNT_FIELDS] for r in rows))


def _write(path_or_buf, header, rows) -> None:
    if isinstance(path_or_buf, (str, Path)):
        with open(path_or_buf, "w", newline="", encoding="utf-8") as fh:
            _write(fh, header, rows)
        return
    writer = csv.writer(path_or_buf, lineterminator="\r\n")
    writer.writerow(header)
    writer.writerows(rows)


def _read(path_or_buf, header) -> Iterable[dict]:
    if isinstance(path_or_buf, (str, Path)):
        with open(path_or_buf, newline="", encoding="utf-8") as fh:
            yield from _read(fh, header)
        return
    reader = csv.DictReader(path_or_buf)
    missing = set(header) - set(reader.fieldnames or ())
    if missing:
        raise DataError(f"CSV missing columns: {sorted(missing)}")
    yield from reader


_LABELS = {"": None, "0": 0, "1": 1, "normal": 0, "anomalous": 1}


def read_transactions(path_or_buf) -> list[TransactionRecord]:
    out = []
    for row in _read(path_or_buf, TX_FIELDS[:-1]):
        try:
            label = _LABELS[(row.get("label") or "").strip().lower()]
        except KeyError:
            raise DataError(f"{row['tx_id']}: bad label {row.get('label')!r}") from None
        out.append(TransactionRecord(
            **{f: row[f] for f in TX_FIELDS[:9]},
            amount=float(row["amount"]), currency=row["currency"].upper(),
            timestamp=int(row["timestamp"]), label=label))
    return out


def read_accounts(path_or_buf) -> list[AccountRecord]:
    out = []
    seen = set()
    for row in _read(path_or_buf, ACCOUNT_FIELDS):
        rec = AccountRecord(**{f: row[f] for f in ACCOUNT_FIELDS[:5]}, flag=int(row["flag"]))
        key = (rec.bank_id, rec.account_id)
        if key in seen:
            raise DataError(f"duplicate account {key}")
        seen.add(key)
        out.append(rec)
    return out


def transactions_csv(rows: Sequence[TransactionRecord]) -> str:
    buf = io.StringIO()
    write_transactions(rows, buf)
    return buf.getvalue()


def check_receivers(txs: Sequence[TransactionRecord], banks: Iterable[str]) -> None:
    known = set(banks)
    for t in txs:
        if t.receiver_bank not in known:
            raise DataError(f"{t.tx_id}: receiver bank {t.receiver_bank!r} is not registered")


def upsample_indices(labels: np.ndarray, ratio: float, rng: Csprng) -> np.ndarray:
    """Row indices after duplicating anomalous rows up to ``ratio`` anomalous per normal.

    Originals are all kept; extra copies are drawn uniformly with replacement
    until there are ``ceil(n_normal * ratio)`` anomalous rows. The result is
    shuffled.
    """
    labels = np.asarray(labels)
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels != 1)
    if len(pos) == 0:
        raise DataError("cannot upsample: no anomalous rows")
    if ratio <= 0:
        raise ValueError("ratio must be positive")
    target = int(np.ceil(len(neg) * ratio - 1e-9))
    extra = max(0, target - len(pos))
    gen = rng.numpy_generator()
    copies = pos[gen.integers(0, len(pos), size=extra)]
    idx = np.concatenate([neg, pos, copies])
    return idx[rng.permutation(len(idx))]


def upsample(rows: Sequence, labels: np.ndarray, ratio: float, rng: Csprng) -> list:
    return [rows[i] for i in upsample_indices(labels, ratio, rng)]


def as_dict(rec) -> dict:
    return asdict(rec)
