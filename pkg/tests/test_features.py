import io
from dataclasses import replace

import numpy as np
import pytest

from fedanomaly.data import DatasetConfig, TransactionRecord, UnknownCurrencyError, generate_synthetic, load_rates
from fedanomaly.features import FEATURE_NAMES, HistoryStore, Normalizer, extract_all, extract_features

DAY = 86400
RATES = load_rates()


def _tx(i, sender, receiver, amount, t, currency="USD"):
    return TransactionRecord(f"T{i}", "s", sender, "B0", "st", "z", "r", receiver, "B1",
                             amount, currency, t)


def brute_force(txs, rates):
    """Rescan the full list for every transaction."""
    usd = [t.amount * rates[t.currency] for t in txs]
    keys = {
        "sender": lambda t: (t.sender_bank, t.sender_account),
        "receiver": lambda t: (t.receiver_bank, t.receiver_account),
        "pair": lambda t: (t.sender_bank, t.sender_account, t.receiver_bank, t.receiver_account),
    }
    out = []
    for tx in txs:
        row = [tx.amount * rates[tx.currency]]
        hist = {}
        for scope, key in keys.items():
            prior = sorted(((o.timestamp, j) for j, o in enumerate(txs)
                            if o.timestamp < tx.timestamp and key(o) == key(tx)))
            hist[scope] = prior
            long = [usd[j] for ts, j in prior if ts >= tx.timestamp - 28 * DAY]
            row += [sum(long) / len(long), max(long)] if long else [0.0, 0.0]
        for scope in keys:
            last = [usd[j] for _, j in hist[scope][-20:]]
            row += [sum(last) / len(last), min(last), max(last)] if last else [0.0, 0.0, 0.0]
        row.append(sum(1 for ts, _ in hist["pair"] if ts >= tx.timestamp - 7 * DAY))
        out.append(row)
    return np.array(out)


def test_feature_count_and_names():
    assert len(FEATURE_NAMES) == 17 and len(set(FEATURE_NAMES)) == 17


def test_first_transaction_has_empty_windows():
    tx = _tx(0, "a", "b", 12.5, 1000, "EUR")
    f = extract_features(tx, HistoryStore.build([tx], RATES))
    assert f[0] == pytest.approx(12.5 * RATES["EUR"])
    assert np.all(f[1:] == 0)


def test_sender_last_window_stats():
    txs = [_tx(i, "a", f"r{i}", amt, 100 * i) for i, amt in enumerate((10.0, 20.0, 30.0))]
    now = _tx(9, "a", "x", 5.0, 1000)
    f = extract_features(now, HistoryStore.build(txs + [now], RATES))
    i = FEATURE_NAMES.index("sender_avg_last20")
    assert tuple(f[i:i + 3]) == (20.0, 10.0, 30.0)


def test_matches_brute_force_oracle():
    txs, _ = generate_synthetic(DatasetConfig(n_transactions=1000, n_accounts=60, seed=11))
    # force some equal timestamps and a shuffled input order
    txs = [replace(t, timestamp=t.timestamp - t.timestamp % 3600) for t in txs]
    order = np.random.default_rng(0).permutation(len(txs))
    txs = [txs[i] for i in order]
    got = extract_all(txs, rates=RATES)
    np.testing.assert_allclose(got, brute_force(txs, RATES), rtol=1e-12, atol=1e-9)


def test_extraction_is_causal():
    txs, _ = generate_synthetic(DatasetConfig(n_transactions=400, n_accounts=30, seed=12))
    cut = txs[200].timestamp
    before = extract_all(txs, rates=RATES)
    rng = np.random.default_rng(1)
    perturbed = [replace(t, amount=float(rng.uniform(1, 1e5))) if t.timestamp > cut else t for t in txs]
    after = extract_all(perturbed, rates=RATES)
    early = np.array([t.timestamp <= cut for t in txs])
    assert np.array_equal(before[early], after[early])


def test_unknown_currency():
    tx = _tx(0, "a", "b", 1.0, 0, "ZZZ")
    with pytest.raises(UnknownCurrencyError):
        extract_all([tx], rates=RATES)


def test_normalizer_train_stats():
    rng = np.random.default_rng(3)
    x = rng.lognormal(size=(500, 4))
    x[:, 2] = 7.0  # zero variance column
    norm = Normalizer.fit(x)
    z = norm.transform(x)
    np.testing.assert_allclose(z[:, [0, 1, 3]].mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(z[:, [0, 1, 3]].std(axis=0), 1, atol=1e-12)
    assert norm.std[2] == 1.0
    np.testing.assert_allclose(z[:, 2], 0, atol=1e-12)
    # two-pass oracle
    logs = np.log1p(x)
    mean = [sum(col) / len(col) for col in logs.T]
    var = [sum((v - m) ** 2 for v in col) / len(col) for col, m in zip(logs.T, mean)]
    np.testing.assert_allclose(norm.mean, mean, rtol=1e-12)
    np.testing.assert_allclose(norm.std[[0, 1, 3]], np.sqrt(np.array(var)[[0, 1, 3]]), rtol=1e-10)


def test_normalizer_reuse_and_serialization():
    rng = np.random.default_rng(4)
    train, test = rng.lognormal(size=(100, 3)), rng.lognormal(size=(20, 3))
    norm = Normalizer.fit(train)
    again = Normalizer.from_bytes(norm.to_bytes())
    assert np.array_equal(norm.transform(test), again.transform(test))
    with pytest.raises(ValueError):
        norm.transform(-train)
