import csv
from dataclasses import fields, replace

import numpy as np
import pytest

from fedanomaly.config import ConfigError
from fedanomaly.data import DatasetConfig, generate_synthetic
from fedanomaly.model import TrainConfig, auprc, forward
from fedanomaly.noise import NoiseSpec
from fedanomaly.pipeline import PipelineConfig, prepare
from fedanomaly.privacy import (TRADEOFF_COLUMNS, AccessViolation, AttackConfig, GuardedFlags, MiaData,
                                central_trainer, inference_noise_sweep, majority_baseline, mean_by, run_mia,
                                split_known, sweep_tradeoff, trend_violations, write_tradeoff)
from fedanomaly.rng import Csprng

SMALL = TrainConfig(epochs=2, batch_size=64, hidden=(16, 8), clip=None)
QUICK_ATTACK = AttackConfig(shadows=2, hidden=(16, 8), epochs=3)


def _mia_data(prep):
    tr = prep.train
    return MiaData(tr.x, tr.labels, tr.flags, [f"{b}:{a}" for b, a in zip(tr.banks, tr.accounts)],
                   prep.test.x, prep.test.labels, prep.test.flags)


@pytest.fixture(scope="module")
def mia_data():
    txs, accounts = generate_synthetic(DatasetConfig(n_transactions=3000, n_accounts=300, anomaly_rate=0.05,
                                                     flag_correlation=0.9, seed=5))
    return _mia_data(prepare(txs, accounts, PipelineConfig(test_fraction=0.2, seed=5)))


# -- guard ---------------------------------------------------------------------------


def test_guard_allows_known_rows_only():
    g = GuardedFlags(np.array([0, 1, 0, 1]), np.array([True, True, False, False]))
    assert g[0] == 0 and list(g[[0, 1]]) == [0, 1]
    assert list(g[np.array([True, True, False, False])]) == [0, 1]
    for idx in (2, [1, 3], slice(None), np.array([False, False, True, False])):
        with pytest.raises(AccessViolation):
            g[idx]
    with pytest.raises(AccessViolation):
        np.asarray(g)
    assert list(g.unlock()) == [0, 1, 0, 1]
    assert list(np.asarray(g)) == [0, 1, 0, 1]


def test_guard_shape_mismatch():
    with pytest.raises(ValueError):
        GuardedFlags(np.zeros(3), np.ones(2, dtype=bool))


def test_attack_reads_unknown_flags_only_after_scoring(monkeypatch, mia_data):
    import fedanomaly.privacy as privacy
    reads = []

    class Recording(GuardedFlags):
        def __getitem__(self, idx):
            reads.append((self._locked, np.asarray(self._allowed[idx]).all()))
            return super().__getitem__(idx)

    monkeypatch.setattr(privacy, "GuardedFlags", Recording)
    run_mia(SMALL, QUICK_ATTACK, mia_data)
    assert reads and all(ok for locked, ok in reads if locked)


# -- configuration and splits ------------------------------------------------------------


def test_shadows_use_the_target_config_field_by_field(mia_data):
    cfg = replace(SMALL, noise=NoiseSpec("gaussian", 0.1), clip=2.0, seed=11)
    res = run_mia(cfg, QUICK_ATTACK, mia_data)
    assert len(res.shadow_configs) == QUICK_ATTACK.shadows
    for sc in res.shadow_configs:
        for f in fields(TrainConfig):
            assert getattr(sc, f.name) == getattr(cfg, f.name), f.name


def test_shadow_trainer_sees_only_known_rows(mia_data):
    calls = []

    def recording(x, flags, labels, cfg):
        calls.append(np.asarray(flags).copy())
        return central_trainer(x, flags, labels, cfg)

    res = run_mia(SMALL, QUICK_ATTACK, mia_data, trainer=recording)
    assert len(calls) == 1 + QUICK_ATTACK.shadows
    assert len(calls[0]) == len(mia_data.x)
    for c in calls[1:]:
        assert len(c) < len(mia_data.x) // 2 + 1
    assert 0 <= res.success <= 1 and 0.5 <= res.baseline <= 1


def test_majority_baseline_matches_guessing_zero():
    bits = np.array([0] * 82 + [1] * 18)
    assert majority_baseline(bits) == pytest.approx(0.82)
    assert majority_baseline(1 - bits) == pytest.approx(0.82)
    assert majority_baseline(np.array([2, 0, 3])) == pytest.approx(2 / 3)
    assert np.isnan(majority_baseline([]))


def test_split_known_keeps_accounts_whole():
    accounts = [f"a{i % 37}" for i in range(1000)]
    mask = split_known(accounts, 0.2, Csprng(1, "t"))
    by_account = {}
    for a, m in zip(accounts, mask):
        by_account.setdefault(a, set()).add(bool(m))
    assert all(len(v) == 1 for v in by_account.values())
    assert sum(v == {True} for v in by_account.values()) == round(0.2 * 37)
    assert np.array_equal(mask, split_known(accounts, 0.2, Csprng(1, "t")))


def test_attack_config_validation():
    for bad in (dict(alpha=0.0), dict(alpha=1.0), dict(shadows=0)):
        with pytest.raises(ConfigError):
            AttackConfig(**bad)


def test_too_few_known_rows(mia_data):
    tiny = MiaData(mia_data.x[:6], mia_data.labels[:6], mia_data.flags[:6], mia_data.accounts[:6])
    with pytest.raises(ConfigError):
        run_mia(SMALL, AttackConfig(shadows=5), tiny)


def test_success_counts_only_anomalous_unknown_rows(mia_data):
    res = run_mia(SMALL, QUICK_ATTACK, mia_data)
    known = split_known(mia_data.accounts, QUICK_ATTACK.alpha, Csprng(QUICK_ATTACK.seed, "mia").fork("known"))
    assert res.n_attacked == int(np.sum(~known & (mia_data.labels == 1)))


# -- sweeps ----------------------------------------------------------------------------


def test_sweep_and_csv(tmp_path, mia_data):
    grid = [NoiseSpec("none", 0.0), NoiseSpec("gaussian", 0.1)]
    rows = sweep_tradeoff(grid, [0.15, 0.3], mia_data, replace(SMALL, clip=2.0), seeds=(0, 1), attack=QUICK_ATTACK)
    assert len(rows) == 2 * 2 * 2
    path = tmp_path / "tradeoff.csv"
    write_tradeoff(rows, path)
    raw = path.read_bytes()
    assert raw.count(b"\r\n") == len(rows) + 1
    with open(path, newline="") as fh:
        read = list(csv.DictReader(fh))
    assert tuple(read[0].keys()) == TRADEOFF_COLUMNS
    assert {r["noise_family"] for r in read} == {"none", "gaussian"}
    means = mean_by(rows, "param", "auprc")
    assert set(means) == {0.0, 0.1}
    with pytest.raises(ConfigError):
        sweep_tradeoff([], [0.2], mia_data, SMALL)


def test_trend_violations():
    assert trend_violations([0.9, 0.92, 0.8], 0.03) == []
    assert trend_violations([0.9, 0.94, 0.8, 0.9], 0.03) == [1, 3]
    assert trend_violations([], 0.0) == []


def test_inference_noise_sweep_rounding_helps(small_fed):
    prep = small_fed
    model = central_trainer(prep.train.x, prep.train.flags, prep.train.labels,
                            TrainConfig(epochs=3, batch_size=32))
    out = inference_noise_sweep(model, prep.train.x, prep.train.labels, prep.train.flags, [0.0, 0.05])
    sel = np.where(prep.train.flags == 1, forward(model, prep.train.x, 1), forward(model, prep.train.x, 0))
    clean = auprc(sel, prep.train.labels)
    assert out[0]["direct"] == pytest.approx(clean)
    assert [r["sigma"] for r in out] == [0.0, 0.05]
    assert out[1]["round"] >= out[1]["direct"] - 1e-12


# -- statistical behaviour -----------------------------------------------------------------

STRONG_ATTACK = AttackConfig(alpha=0.2, epochs=200, lr=0.05)
TARGET = TrainConfig(epochs=20, batch_size=256, clip=100.0)


def _calibration_data(rho):
    txs, accounts = generate_synthetic(DatasetConfig(n_transactions=20_000, n_accounts=2_000, anomaly_rate=0.05,
                                                     flag_correlation=rho, flag_prevalence=0.05, seed=1))
    return _mia_data(prepare(txs, accounts, PipelineConfig(test_fraction=0.2, seed=1)))


def test_attack_beats_majority_guess_when_flags_track_anomalies():
    # at rho = 1 every anomalous receiver is flagged, so guessing "flagged" is already perfect
    data = _calibration_data(0.5)
    for seed in range(5):
        res = run_mia(replace(TARGET, seed=seed), replace(STRONG_ATTACK, seed=seed), data)
        assert res.success > res.baseline, (seed, res.success, res.baseline)


def test_attack_is_no_better_than_guessing_without_signal():
    data = _calibration_data(0.0)
    rows = sweep_tradeoff([NoiseSpec("gaussian", 10.0)], [0.2], data, TARGET, seeds=range(5), attack=STRONG_ATTACK)
    gap = np.mean([r["mia_success"] - r["baseline"] for r in rows])
    assert abs(gap) <= 0.05
