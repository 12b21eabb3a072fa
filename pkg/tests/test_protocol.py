import itertools

import numpy as np
import pytest
from scipy import stats

from fedanomaly.config import ConfigError
from fedanomaly.model import TrainConfig, forward, train_centralized
from fedanomaly.noise import NoiseSpec, noise_default
from fedanomaly.protocol import (Aggregator, Bank, SessionConfig, TrainBatchJob, UnknownAccountError,
                                 apply_strategy, infer, infer_batch, noise_for_clip, train, train_batch)
from fedanomaly.rng import Csprng
from fedanomaly.transport import AGGREGATOR, HUB, MsgType, ProtocolMessage, bank, pack_payload

EPS = 2.0**-24
MODES = [dict(ot_mode="ideal"), dict(ot_mode="crypto"), dict(ot_mode="ideal", key_cache=True),
         dict(ot_mode="crypto", key_cache=True)]
MODE_IDS = ["ideal", "crypto", "keyed-ideal", "keyed-crypto"]


def _accounts(bits, n_banks=2):
    """Row i's receiver is account A{i} at bank i % n_banks with flag bits[i] (status 5 for abnormal)."""
    tables = {b: {} for b in range(n_banks)}
    for i, bit in enumerate(bits):
        tables[i % n_banks][f"A{i}"] = 5 * int(bit)
    banks = [i % n_banks for i in range(len(bits))]
    return banks, [f"A{i}" for i in range(len(bits))], tables


def _selected(u0, u1, bits):
    return sum(u1[i] if b else u0[i] for i, b in enumerate(bits))


@pytest.mark.parametrize("mode", MODES, ids=MODE_IDS)
def test_single_row_flag_zero(mode):
    u0, u1 = np.array([[1.5, -2.0, 3.25]]), np.array([[7.0, 7.0, 7.0]])
    banks, accs, tables = _accounts([0])
    u, res = train_batch(TrainBatchJob(banks, accs, 3, u0, u1), NoiseSpec(), tables, SessionConfig(**mode))
    assert np.abs(u - u0[0]).max() <= EPS
    assert res.rounds == 1


@pytest.mark.parametrize("mode", MODES, ids=MODE_IDS)
def test_mixed_bits_match_plaintext_selection(mode):
    rng = np.random.default_rng(1)
    u0, u1 = rng.normal(size=(3, 6)) * 50, rng.normal(size=(3, 6)) * 50
    bits = [1, 0, 1]
    banks, accs, tables = _accounts(bits, 3)
    u, _ = train_batch(TrainBatchJob(banks, accs, 6, u0, u1), NoiseSpec(), tables, SessionConfig(**mode), seed=4)
    assert np.abs(u - _selected(u0, u1, bits)).max() <= 3 * EPS


def test_exhaustive_small_patterns():
    rng = np.random.default_rng(2)
    for n in range(1, 5):
        for bits in itertools.product([0, 1], repeat=n):
            u0, u1 = rng.normal(size=(n, 4)), rng.normal(size=(n, 4))
            banks, accs, tables = _accounts(bits)
            u, _ = train_batch(TrainBatchJob(banks, accs, 4, u0, u1), NoiseSpec(), tables, seed=n)
            assert np.abs(u - _selected(u0, u1, bits)).max() <= 2.0**-20


def test_result_independent_of_delivery_order():
    rng = np.random.default_rng(3)
    bits = rng.integers(0, 2, 12)
    u0, u1 = rng.normal(size=(12, 5)), rng.normal(size=(12, 5))
    banks, accs, tables = _accounts(bits, 3)
    outs = []
    for net_seed in range(4):
        session = SessionConfig(network_seed=net_seed, chunk_cap=2)
        outs.append(train_batch(TrainBatchJob(banks, accs, 5, u0, u1), NoiseSpec("gaussian", 1.0),
                                tables, session, seed=9)[0])
    assert all(np.array_equal(outs[0], o) for o in outs[1:])


def test_gaussian_noise_std():
    sigma = 3.0
    banks, accs, tables = _accounts([0, 1, 1, 0])
    zeros = np.zeros((4, 8))
    samples = np.array([train_batch(TrainBatchJob(banks, accs, 8, zeros, zeros), NoiseSpec("gaussian", sigma),
                                    tables, seed=rep)[0] for rep in range(200)])
    assert np.all(np.abs(samples.std(axis=0, ddof=1) / sigma - 1) < 0.15)


def test_noise_scale_multiplies_parameter():
    banks, accs, tables = _accounts([0])
    z = np.zeros((1, 2000))
    u, _ = train_batch(TrainBatchJob(banks, accs, 2000, z, z), NoiseSpec("laplace", 0.1), tables,
                       noise_scale=100.0)
    assert abs(u.std() / (10.0 * np.sqrt(2)) - 1) < 0.1


def test_noise_default():
    assert noise_default(100) == 1000
    assert noise_default(1) == 10
    assert noise_default(2, multiplier=3) == 6
    with pytest.raises(ConfigError):
        noise_default(0)
    spec = noise_for_clip(100)
    assert spec == NoiseSpec("gaussian", 10.0) and spec.std(100) == 1000
    with pytest.raises(ConfigError):
        NoiseSpec("gaussian", -1)


def test_unknown_account_is_skipped():
    u0, u1 = np.ones((3, 2)), 2 * np.ones((3, 2))
    banks, accs, tables = _accounts([1, 1, 0])
    del tables[1]["A1"]
    for mode in MODES:
        u, res = train_batch(TrainBatchJob(banks, accs, 2, u0, u1), NoiseSpec(), tables, SessionConfig(**mode))
        np.testing.assert_allclose(u, [3.0, 3.0], atol=4 * EPS)
        assert res.leakage.bank_skipped[1] == 1


def test_view_minimality_and_leakage():
    rng = np.random.default_rng(4)
    bits = rng.integers(0, 2, 10)
    banks, accs, tables = _accounts(bits, 2)
    u0 = rng.normal(size=(10, 3))
    _, res = train_batch(TrainBatchJob(banks, accs, 3, u0, u0), NoiseSpec(), tables)
    assert dict(res.hub_received) == {MsgType.AGGREGATE_SHARE: 1}
    assert res.leakage.aggregator_observations == {0: 5, 1: 5}
    assert {b: sum(q.values()) for b, q in res.leakage.bank_queries.items()} == {0: 5, 1: 5}
    report = res.leakage.to_json()
    assert set(report["aggregator"]) == {"receiver_bank_rows"}
    assert "A0" not in str(report["aggregator"])


def test_bank_share_is_uniform():
    """Bytes forwarded by the bank look uniform for fixed candidates."""
    u0, u1 = np.array([[1.0]]), np.array([[2.0]])
    banks, accs, tables = _accounts([1])
    low = []
    for seed in range(2000):
        bank0 = Bank(0, tables[0], Csprng(seed, "bank"))
        from fedanomaly.protocol.parties import Hub, SelectionRound

        def script():
            yield SelectionRound(bytes(16), "train", TrainBatchJob(banks, accs, 1, u0, u1))

        hub = Hub(script(), [0], Csprng(seed, "hub"))
        to_bank = [m for dst, m in hub.start() if dst == bank(0)]
        (dst, fwd), = bank0.handle(to_bank[0])
        assert dst == AGGREGATOR
        from fedanomaly.transport import u64_array, unpack_payload
        low.append(int(u64_array(unpack_payload(fwd.payload)[1][0])[0]) & 0xFF)
    counts = np.bincount(low, minlength=256)
    assert stats.chisquare(counts).pvalue > 0.01


def _expect(sid, chunks, dim):
    return ProtocolMessage(sid, HUB, MsgType.CONTROL, pack_payload({"kind": "expect", "dim": dim,
                                                                    "chunks": chunks}))


def _share(sid, b, chunk, rows):
    arr = np.asarray(rows, dtype="<u8")
    return ProtocolMessage(sid, bank(b), MsgType.SHARE_FORWARD,
                           pack_payload({"chunk": chunk, "rows": len(rows), "skipped": []}, [arr]))


def test_aggregator_rejects_replays():
    agg = Aggregator(Csprng(0))
    sid = bytes(range(16))
    assert agg.handle(_expect(sid, {"0": 1, "1": 1}, 2)) == []
    assert agg.handle(_share(sid, 0, 0, [[1, 2]])) == []
    assert agg.handle(_share(sid, 0, 0, [[1, 2]])) == [] and agg.rejected == 1
    (dst, out), = agg.handle(_share(sid, 1, 0, [[10, 20]]))
    assert dst == HUB and out.type == MsgType.AGGREGATE_SHARE
    assert agg.handle(_share(sid, 1, 0, [[10, 20]])) == [] and agg.rejected == 2
    assert agg.observations == {0: 1, 1: 1}


def test_bank_rejects_replayed_request():
    tables = {"A0": 0}
    b = Bank(0, tables, Csprng(0))
    msg = ProtocolMessage(bytes(16), HUB, MsgType.MASKED_PAIR,
                          pack_payload({"kind": "train", "chunk": 0, "accounts": ["A0"], "dim": 1},
                                       [np.array([5], dtype="<u8"), np.array([6], dtype="<u8")]))
    assert len(b.handle(msg)) == 1
    assert b.handle(msg) == [] and b.rejected == 1
    spoofed = ProtocolMessage(bytes(16), bank(3), MsgType.MASKED_PAIR, msg.payload)
    assert b.handle(spoofed) == [] and b.rejected == 2


def _fed_inputs(prep):
    tr = prep.train
    return tr.x, tr.labels, tr.banks, tr.accounts, prep.bank_accounts


def test_federated_matches_centralized(small_fed):
    x, y, banks, accs, tables = _fed_inputs(small_fed)
    cfg = TrainConfig(epochs=2, batch_size=64, clip=None, seed=5, hidden=(16, 8))
    central = train_centralized(x, small_fed.train.flags, y, cfg).model
    steps = 2 * int(np.ceil(len(x) / 64))
    for mode in (dict(ot_mode="ideal"), dict(ot_mode="ideal", key_cache=True)):
        fed = train(x, y, banks, accs, tables, cfg, SessionConfig(**mode))
        assert np.abs(fed.model.params - central.params).max() <= steps * 2.0**-20
        assert fed.session.rounds == steps
        assert fed.session.hub_received[MsgType.AGGREGATE_SHARE] == steps


def test_federated_with_clip_and_reduction(small_fed):
    x, y, banks, accs, tables = _fed_inputs(small_fed)
    cfg = TrainConfig(epochs=1, batch_size=100, clip=1.0, seed=6, hidden=(8,))
    # reduction treats every normal-labelled row as having a flag-0 receiver
    central = train_centralized(x, small_fed.train.flags * y, y, cfg).model
    fed = train(x, y, banks, accs, tables, cfg, SessionConfig(ot_reduction=True))
    assert np.abs(fed.model.params - central.params).max() <= 1e-5
    assert fed.session.ot_transfers == int(y.sum())


def test_key_cache_ot_count_independent_of_epochs(small_fed):
    x, y, banks, accs, tables = _fed_inputs(small_fed)
    counts = []
    for epochs in (1, 3):
        cfg = TrainConfig(epochs=epochs, batch_size=200, clip=None, seed=1, hidden=(4,))
        res = train(x, y, banks, accs, tables, cfg, SessionConfig(key_cache=True, ot_reduction=True))
        counts.append(res.session.ot_transfers)
    anomalous_receivers = {(b, a) for b, a, l in zip(banks, accs, y) if l == 1}
    assert counts == [len(anomalous_receivers)] * 2


def test_flag_blind_runs_no_ot(small_fed):
    x, y, banks, accs, tables = _fed_inputs(small_fed)
    cfg = TrainConfig(epochs=1, batch_size=200, clip=None, seed=1, hidden=(4,))
    res = train(x, y, banks, accs, tables, cfg, flag_blind=True)
    central = train_centralized(x, np.zeros(len(x)), y, cfg).model
    assert res.session.ot_transfers == 0
    assert np.abs(res.model.params - central.params).max() <= 1e-6


def _toy_infer():
    from fedanomaly.model import MlpModel
    m = MlpModel.init((4, 6, 1), Csprng(2))
    x = np.random.default_rng(5).normal(size=(20, 3))
    bits = [i % 2 for i in range(20)]
    banks, accs, tables = _accounts(bits, 2)
    return m, x, bits, banks, accs, tables


@pytest.mark.parametrize("mode", ["ideal", "crypto"])
def test_inference_selects_flagged_score(mode):
    m, x, bits, banks, accs, tables = _toy_infer()
    res = infer_batch(m, x, banks, accs, tables, "direct", session=SessionConfig(ot_mode=mode))
    want = np.where(np.array(bits) == 1, forward(m, x, 1), forward(m, x, 0))
    assert np.abs(res.scores - want).max() <= EPS
    rounded = apply_strategy(res.raw, res.s0, res.s1, "round")
    assert np.array_equal(rounded, want)
    assert res.session.leakage.aggregator_observations == {}
    assert not any("aggregator" in link for link in res.session.comms.bytes_sent)


def test_inference_round_with_noise_is_always_a_candidate():
    m, x, bits, banks, accs, tables = _toy_infer()
    for seed in range(5):
        res = infer_batch(m, x, banks, accs, tables, "round", NoiseSpec("gaussian", 0.005), seed=seed)
        assert np.all((res.scores == res.s0) | (res.scores == res.s1))


def test_inference_equal_candidates_and_declared_zero_noise():
    from fedanomaly.model import MlpModel
    m = MlpModel.init((4, 6, 1), Csprng(2))
    w0 = m.weights[0].copy()
    w0[-1] = 0
    m = MlpModel([w0, m.weights[1]], m.biases)
    x = np.random.default_rng(6).normal(size=3)
    s = forward(m, x, 0)
    for b in (0, 1):
        banks, accs, tables = _accounts([b])
        for strategy in ("direct", "round"):
            assert abs(infer(m, x, 0, "A0", tables, strategy) - s) <= EPS
    banks, accs, tables = _accounts([1])
    plain = infer(m, x, 0, "A0", tables, "round")
    declared = infer(m, x, 0, "A0", tables, "round", NoiseSpec("gaussian", 0.0))
    assert plain == declared


def test_inference_leakage_and_unknown_account():
    m, x, bits, banks, accs, tables = _toy_infer()
    res = infer_batch(m, x[:1], banks[:1], accs[:1], tables)
    assert res.session.leakage.bank_queries[0] == {"infer": 1}
    assert "aggregator" not in {k[1] for k in res.session.comms.bytes_sent}
    with pytest.raises(UnknownAccountError):
        infer(m, x[0], 0, "nope", tables)


def test_apply_strategy_ties_and_nan():
    s0, s1 = np.array([0.25, 0.25, 0.25]), np.array([0.75, 0.75, 0.75])
    raw = np.array([0.5, 0.625, np.nan])
    assert np.array_equal(apply_strategy(raw, s0, s1, "round")[:2], [0.25, 0.75])
    assert np.isnan(apply_strategy(raw, s0, s1, "round")[2])
    with pytest.raises(ValueError):
        apply_strategy(raw, s0, s1, "median")
