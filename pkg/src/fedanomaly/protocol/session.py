"""Session assembly and runners: federated training, single batches, inference."""
from __future__ import annotations

import threading
from collections import Counter
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..config import ConfigError, load_kv
from ..model import (MlpModel, TrainConfig, apply_update, batch_sid, clipped_gradients,
                     clipped_sum, epoch_batches, forward)
from ..noise import NoiseSpec, noise_default
from ..ring import DEFAULT_FRACTION_BITS
from ..rng import Csprng, derive_seed, seed_from_int
from ..transport import (AGGREGATOR, HUB, MAX_PAYLOAD, Counters, MsgType, PartyId, SimNetwork,
                         TcpEndpoint, TransportError, bank, run_party_tcp)
from .parties import (KIND_INFER, KIND_TRAIN, OT_MODES, Aggregator, Bank, Hub, ProtocolError,
                      SelectionRound, TrainBatchJob, UnknownAccountError)

STRATEGIES = ("direct", "round")


@dataclass
class SessionConfig:
    """Deployment knobs shared by all parties of a run."""
    ot_mode: str = "ideal"
    ot_reduction: bool = False
    key_cache: bool = False
    transport: str = "sim"
    host: str = "127.0.0.1"
    base_port: int = 0
    timeout: float = 60.0
    network_seed: int = 0
    fraction_bits: int = DEFAULT_FRACTION_BITS
    max_payload: int = MAX_PAYLOAD
    chunk_cap: int = 1024
    hub_seed: int | None = None
    aggregator_seed: int | None = None
    bank_seed: int | None = None

    def __post_init__(self):
        if self.ot_mode not in OT_MODES:
            raise ConfigError(f"ot_mode must be one of {OT_MODES}")
        if self.transport not in ("sim", "tcp"):
            raise ConfigError("transport must be sim or tcp")

    @classmethod
    def from_mapping(cls, values: dict) -> SessionConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in names})

    @classmethod
    def load(cls, path: str | Path) -> SessionConfig:
        return cls.from_mapping(load_kv(path))

    def party_rngs(self, seed: int, banks: Sequence[int]):
        hub = Csprng(self.hub_seed if self.hub_seed is not None else seed, "hub")
        agg = Csprng(self.aggregator_seed if self.aggregator_seed is not None else seed, "aggregator")
        bank_base = self.bank_seed if self.bank_seed is not None else seed
        return hub, agg, {b: Csprng(bank_base, "bank", b) for b in banks}

    def port_of(self, party: PartyId) -> int:
        if self.base_port == 0:
            return 0
        if party == HUB:
            return self.base_port
        if party == AGGREGATOR:
            return self.base_port + 1
        return self.base_port + 2 + party.index


@dataclass
class LeakageLedger:
    """What each party learned beyond its own inputs.

    Banks see the accounts they are queried about; the aggregator sees only
    how many rows each receiver bank contributed.
    """
    bank_queries: dict[int, dict[str, int]] = field(default_factory=dict)
    bank_distinct_accounts: dict[int, int] = field(default_factory=dict)
    bank_key_setup_accounts: dict[int, int] = field(default_factory=dict)
    bank_skipped: dict[int, int] = field(default_factory=dict)
    aggregator_observations: dict[int, int] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "banks": {str(b): {"queries": dict(q), "total_queries": sum(q.values()),
                               "distinct_accounts": self.bank_distinct_accounts.get(b, 0),
                               "key_setup_accounts": self.bank_key_setup_accounts.get(b, 0),
                               "skipped_unknown": self.bank_skipped.get(b, 0)}
                      for b, q in sorted(self.bank_queries.items())},
            "aggregator": {"receiver_bank_rows": {str(b): n for b, n in
                                                  sorted(self.aggregator_observations.items())}},
        }


def leakage_report(parties: dict) -> LeakageLedger:
    led = LeakageLedger()
    for pid, p in parties.items():
        if isinstance(p, Bank):
            led.bank_queries[p.index] = dict(p.queries)
            led.bank_distinct_accounts[p.index] = len(p.accounts_queried)
            led.bank_key_setup_accounts[p.index] = p.key_setup_accounts
            led.bank_skipped[p.index] = p.skipped
        elif isinstance(p, Aggregator):
            led.aggregator_observations = dict(p.observations)
    return led


@dataclass
class SessionResult:
    comms: Counters
    ot_transfers: int
    ot_sessions: int
    leakage: LeakageLedger
    hub_received: Counter
    rounds: int

    def comms_json(self) -> dict:
        out = self.comms.to_json()
        out["ot_transfers"] = self.ot_transfers
        out["ot_sessions"] = self.ot_sessions
        return out


def run_parties(parties: dict, session: SessionConfig, latency=None) -> Counters:
    if session.transport == "sim":
        net = SimNetwork(parties, seed=session.network_seed, latency=latency,
                         max_payload=session.max_payload)
        net.run(start=[HUB])
        hub = parties[HUB]
        if not hub.done:
            raise ProtocolError("session stalled before the hub finished")
        return net.counters
    return run_tcp(parties, session)


def run_tcp(parties: dict, session: SessionConfig) -> Counters:
    """Run every party on its own thread over loopback TCP."""
    endpoints = {}
    addresses = {pid: (session.host, session.port_of(pid)) for pid in parties}
    try:
        for pid in parties:
            endpoints[pid] = TcpEndpoint(pid, addresses, timeout=session.timeout,
                                         max_payload=session.max_payload)
        for pid, ep in endpoints.items():
            addresses[pid] = (session.host, ep.port)
        for ep in endpoints.values():
            ep.addresses = dict(addresses)
        errors = []

        def drive(pid):
            try:
                run_party_tcp(parties[pid], endpoints[pid])
            except BaseException as exc:  # surfaced after join
                errors.append((pid, exc))

        threads = [threading.Thread(target=drive, args=(pid,), daemon=True)
                   for pid in parties if pid != HUB]
        for t in threads:
            t.start()
        drive(HUB)
        for t in threads:
            t.join(session.timeout)
        if errors:
            pid, exc = errors[0]
            raise TransportError(f"{pid} failed: {exc}") from exc
        if any(t.is_alive() for t in threads):
            raise TransportError("parties did not shut down in time")
        total = Counters()
        for ep in endpoints.values():
            for key, n in ep.counters.bytes_sent.items():
                total.bytes_sent[key] = total.bytes_sent.get(key, 0) + n
                total.frames_sent[key] = total.frames_sent.get(key, 0) + ep.counters.frames_sent[key]
        return total
    finally:
        for ep in endpoints.values():
            ep.close()


def build_parties(script, bank_accounts: dict[int, dict[str, int]], session: SessionConfig, seed: int,
                  train_noise: NoiseSpec = NoiseSpec(), noise_scale: float = 1.0,
                  infer_noise: NoiseSpec = NoiseSpec(),
                  key_accounts: dict[int, list[str]] | None = None, with_aggregator: bool = True) -> dict:
    banks = sorted(bank_accounts)
    hub_rng, agg_rng, bank_rngs = session.party_rngs(seed, banks)
    parties = {HUB: Hub(script, banks, hub_rng, session.ot_mode, key_accounts,
                        session.fraction_bits, session.max_payload, session.chunk_cap, with_aggregator)}
    if with_aggregator:
        parties[AGGREGATOR] = Aggregator(agg_rng, train_noise, noise_scale, session.fraction_bits)
    for b in banks:
        parties[bank(b)] = Bank(b, bank_accounts[b], bank_rngs[b], infer_noise, session.ot_mode,
                                session.fraction_bits)
    return parties


def _result(parties, counters) -> SessionResult:
    hub = parties[HUB]
    return SessionResult(counters, hub.ot_stats.transfers, hub.ot_stats.sessions,
                         leakage_report(parties), hub.received, hub.rounds_completed)


# -- training -----------------------------------------------------------------------


def train_batch(job: TrainBatchJob, noise: NoiseSpec, bank_accounts: dict[int, dict[str, int]],
                session: SessionConfig | None = None, seed: int = 0, noise_scale: float = 1.0,
                sid: bytes | None = None) -> tuple[np.ndarray, SessionResult]:
    """One oblivious batch: returns the decoded (noisy) sum of selected updates at the hub."""
    session = session or SessionConfig()
    sid = sid or derive_seed(seed_from_int(seed), "batch")[:16]
    out = {}

    def script():
        out["u"] = yield SelectionRound(sid, KIND_TRAIN, job)

    keys = None
    if session.key_cache:
        keys = {}
        for b, a in zip(job.banks.tolist(), job.accounts):
            keys.setdefault(b, []).append(a)
    parties = build_parties(script(), bank_accounts, session, seed, noise, noise_scale, key_accounts=keys)
    counters = run_parties(parties, session)
    return out["u"], _result(parties, counters)


@dataclass
class FederatedResult:
    model: MlpModel
    session: SessionResult


def ot_rows(labels: np.ndarray, ot_reduction: bool) -> np.ndarray:
    """Rows whose receiver flag must be fetched obliviously.

    With OT reduction, normal-labelled rows are assumed to have a flag-0
    receiver and are computed by the hub alone.
    """
    labels = np.asarray(labels)
    return labels == 1 if ot_reduction else np.ones(len(labels), dtype=bool)


@dataclass
class TrainingPlan:
    """Hub script plus what the other parties need to be configured with."""
    script: object
    state: dict
    key_accounts: dict[int, list[str]] | None
    noise: NoiseSpec
    noise_scale: float


def training_plan(x: np.ndarray, labels, receiver_banks, receiver_accounts: Sequence[str],
                  cfg: TrainConfig, session: SessionConfig, flag_blind: bool = False,
                  model: MlpModel | None = None,
                  on_epoch: Callable[[int, MlpModel], None] | None = None) -> TrainingPlan:
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    receiver_banks = np.asarray(receiver_banks, dtype=np.int64)
    needs_ot = np.zeros(len(x), dtype=bool) if flag_blind else ot_rows(labels, session.ot_reduction)
    if model is None:
        model = MlpModel.init(cfg.sizes, Csprng(cfg.seed, "model"))
    state = {"model": model}
    dim = model.n_params

    def script():
        m = state["model"]
        for epoch in range(1, cfg.epochs + 1):
            lr = cfg.lr_at(epoch)
            for j, idx in enumerate(epoch_batches(len(x), cfg.batch_size, cfg.seed, epoch)):
                ot_idx = idx[needs_ot[idx]]
                plain_idx = idx[~needs_ot[idx]]
                plain = None
                if len(plain_idx):
                    plain = clipped_sum(m, x[plain_idx], 0.0, labels[plain_idx], cfg.weight_decay, cfg.clip)

                def compute(positions, m=m, ot_idx=ot_idx):
                    rows = ot_idx[positions]
                    g0 = clipped_gradients(m, x[rows], 0.0, labels[rows], cfg.weight_decay, cfg.clip)
                    g1 = clipped_gradients(m, x[rows], 1.0, labels[rows], cfg.weight_decay, cfg.clip)
                    return g0, g1

                job = TrainBatchJob(receiver_banks[ot_idx], [receiver_accounts[i] for i in ot_idx],
                                    dim, compute=compute, plain=plain)
                u = yield SelectionRound(batch_sid(cfg.seed, epoch, j), KIND_TRAIN, job)
                m = apply_update(m, u, lr, cfg.batch_size)
            state["model"] = m
            if on_epoch:
                on_epoch(epoch, m)

    keys = None
    if session.key_cache and not flag_blind:
        keys = {}
        for i in np.flatnonzero(needs_ot):
            keys.setdefault(int(receiver_banks[i]), []).append(receiver_accounts[i])
        keys = {b: list(dict.fromkeys(v)) for b, v in keys.items()}
    noise_scale = cfg.clip if cfg.clip is not None else 1.0
    return TrainingPlan(script(), state, keys, cfg.noise, noise_scale)


def train(x: np.ndarray, labels, receiver_banks, receiver_accounts: Sequence[str],
          bank_accounts: dict[int, dict[str, int]], cfg: TrainConfig,
          session: SessionConfig | None = None, flag_blind: bool = False,
          model: MlpModel | None = None, latency=None,
          on_epoch: Callable[[int, MlpModel], None] | None = None) -> FederatedResult:
    """Federated SGD: the hub learns the model, banks keep the flags.

    ``flag_blind`` trains the ablation that always feeds flag 0; it needs no
    OT at all, but still goes through the aggregator so it receives the same
    noise treatment.
    """
    session = session or SessionConfig()
    plan = training_plan(x, labels, receiver_banks, receiver_accounts, cfg, session, flag_blind,
                         model, on_epoch)
    parties = build_parties(plan.script, bank_accounts, session, cfg.seed, plan.noise, plan.noise_scale,
                            key_accounts=plan.key_accounts)
    counters = run_parties(parties, session, latency)
    return FederatedResult(plan.state["model"], _result(parties, counters))


def noise_for_clip(clip: float, sigma: float | None = None) -> NoiseSpec:
    """Gaussian training noise with absolute std ``sigma`` (default ``10 * clip``),
    expressed as a multiplier of the clip bound."""
    sigma = noise_default(clip) if sigma is None else sigma
    return NoiseSpec("gaussian", sigma / clip)


# -- inference ----------------------------------------------------------------------


def apply_strategy(raw: np.ndarray, s0: np.ndarray, s1: np.ndarray, strategy: str) -> np.ndarray:
    """``direct`` returns the noisy score; ``round`` snaps it to the nearer of s0/s1 (ties to s0)."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    raw = np.asarray(raw, dtype=np.float64)
    if strategy == "direct":
        return raw
    out = np.where(np.abs(raw - s0) <= np.abs(raw - s1), s0, s1)
    return np.where(np.isnan(raw), np.nan, out)


@dataclass
class InferResult:
    scores: np.ndarray
    raw: np.ndarray
    s0: np.ndarray
    s1: np.ndarray
    session: SessionResult


def infer_batch(model: MlpModel, x: np.ndarray, receiver_banks, receiver_accounts: Sequence[str],
                bank_accounts: dict[int, dict[str, int]], strategy: str = "direct",
                noise: NoiseSpec = NoiseSpec(), session: SessionConfig | None = None,
                seed: int = 0, sid: bytes | None = None) -> InferResult:
    """Two-party scoring between the hub and each receiver bank; no aggregator traffic.

    Rows whose account the bank does not know come back as NaN.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    session = session or SessionConfig()
    if session.key_cache:
        session = SessionConfig(**{**session.__dict__, "key_cache": False})
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    s0 = np.atleast_1d(forward(model, x, 0))
    s1 = np.atleast_1d(forward(model, x, 1))
    sid = sid or derive_seed(seed_from_int(seed), "infer")[:16]
    out = {}

    def script():
        job = TrainBatchJob(np.asarray(receiver_banks), list(receiver_accounts), 1,
                            u0=s0[:, None], u1=s1[:, None])
        out["raw"] = yield SelectionRound(sid, KIND_INFER, job)

    parties = build_parties(script(), bank_accounts, session, seed, infer_noise=noise, with_aggregator=False)
    counters = run_parties(parties, session)
    raw = out["raw"]
    return InferResult(apply_strategy(raw, s0, s1, strategy), raw, s0, s1, _result(parties, counters))


def infer(model: MlpModel, x, receiver_bank: int, receiver_account: str,
          bank_accounts: dict[int, dict[str, int]], strategy: str = "direct",
          noise: NoiseSpec = NoiseSpec(), session: SessionConfig | None = None, seed: int = 0) -> float:
    res = infer_batch(model, np.atleast_2d(x), [receiver_bank], [receiver_account], bank_accounts,
                      strategy, noise, session, seed)
    if np.isnan(res.scores[0]):
        raise UnknownAccountError(f"bank {receiver_bank} does not hold account {receiver_account!r}")
    return float(res.scores[0])
