"""Flag-inference attack against the trained detector, and privacy/utility sweeps.

The attacker is the hub. It knows the receiver flags of a fraction ``alpha``
of accounts (sampled per account) and wants the flags behind the anomalous
transactions of the remaining accounts.

1. Train ``m`` shadow detectors on random halves of the known transactions,
   with exactly the target's training configuration.
2. For each shadow's anomalous training transactions, score both flag
   hypotheses and build attack rows ``[features, score_f, f]`` labelled by
   whether ``f`` is the true flag bit. Train the attack MLP on them.
3. For each anomalous unknown transaction, score both hypotheses with the
   target and pick the one the attack MLP rates higher (ties: flag 0).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import ConfigError
from .model import (MlpModel, TrainConfig, apply_update, auprc, clipped_sum, epoch_batches, forward,
                    train_centralized)
from .noise import NoiseSpec
from .protocol.session import apply_strategy
from .rng import Csprng

TRADEOFF_COLUMNS = ("noise_family", "param", "alpha", "mia_success", "baseline", "auprc", "seed")


class AccessViolation(RuntimeError):
    pass


class GuardedFlags:
    """Flag bits the attacker may read only on its known accounts until scoring.

    Indexing follows numpy rules; any read touching a row outside
    ``allowed`` raises :class:`AccessViolation` while the guard is locked.
    """

    def __init__(self, values: np.ndarray, allowed: np.ndarray):
        self._values = np.asarray(values).copy()
        self._allowed = np.asarray(allowed, dtype=bool).copy()
        if self._allowed.shape != self._values.shape:
            raise ValueError("allowed mask must match the flag array")
        self._locked = True

    def __len__(self):
        return len(self._values)

    def __getitem__(self, idx):
        if self._locked and not np.all(self._allowed[idx]):
            raise AccessViolation("flags of unknown accounts read before scoring")
        return self._values[idx]

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self[...], dtype=dtype)

    def unlock(self) -> np.ndarray:
        self._locked = False
        return self._values


@dataclass
class AttackConfig:
    alpha: float = 0.2
    shadows: int = 5
    hidden: tuple[int, ...] = (128, 64, 64)
    epochs: int = 10
    lr: float = 1e-2
    batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.shadows < 1:
            raise ConfigError("need at least one shadow model")


@dataclass
class MiaData:
    """Training transactions (normalized features) with receiver identity and flag bit."""
    x: np.ndarray
    labels: np.ndarray
    flags: np.ndarray
    accounts: Sequence
    x_test: np.ndarray | None = None
    labels_test: np.ndarray | None = None
    flags_test: np.ndarray | None = None


@dataclass
class AttackResult:
    success: float
    baseline: float
    auprc: float
    n_attacked: int
    n_attack_rows: int
    shadow_configs: list = field(default_factory=list)
    target: MlpModel | None = None


Trainer = Callable[[np.ndarray, np.ndarray, np.ndarray, TrainConfig], MlpModel]


def central_trainer(x, flags, labels, cfg: TrainConfig) -> MlpModel:
    return train_centralized(x, flags, labels, cfg).model


def split_known(accounts: Sequence, alpha: float, rng: Csprng) -> np.ndarray:
    """Boolean mask of rows whose account falls in the attacker's known set."""
    keys = np.asarray([str(a) for a in accounts])
    uniq = np.unique(keys)
    n_known = max(1, int(round(alpha * len(uniq))))
    known = set(uniq[rng.permutation(len(uniq))[:n_known]].tolist())
    return np.fromiter((k in known for k in keys), dtype=bool, count=len(keys))


def _attack_inputs(x, scores, flag):
    return np.concatenate([x, np.asarray(scores)[:, None]], axis=1), np.full(len(x), float(flag))


def run_mia(cfg: TrainConfig, attack: AttackConfig, data: MiaData, trainer: Trainer = central_trainer,
            target: MlpModel | None = None) -> AttackResult:
    x = np.asarray(data.x, dtype=np.float64)
    labels = np.asarray(data.labels, dtype=np.float64)
    flags = np.asarray(data.flags, dtype=np.float64)
    rng = Csprng(attack.seed, "mia")
    known = split_known(data.accounts, attack.alpha, rng.fork("known"))
    kn = np.flatnonzero(known)
    unknown_anom = np.flatnonzero(~known & (labels == 1))
    if len(kn) < 2 * attack.shadows:
        raise ConfigError(f"only {len(kn)} known transactions for {attack.shadows} shadow splits")

    # the target is trained by the protocol, which does see every flag
    if target is None:
        target = trainer(x, flags, labels, cfg)
    flags = GuardedFlags(flags, known)

    rows, row_flags, row_labels, shadow_cfgs = [], [], [], []
    for s in range(attack.shadows):
        perm = kn[rng.fork("shadow", s).permutation(len(kn))]
        member = perm[: len(perm) // 2]
        shadow_cfg = replace(cfg)
        shadow_cfgs.append(shadow_cfg)
        shadow = trainer(x[member], flags[member], labels[member], shadow_cfg)
        probe = member[labels[member] == 1]
        for f in (0, 1):
            xa, fa = _attack_inputs(x[probe], forward(shadow, x[probe], f), f)
            rows.append(xa)
            row_flags.append(fa)
            row_labels.append((flags[probe] == f).astype(np.float64))
    xa = np.concatenate(rows)
    fa = np.concatenate(row_flags)
    ya = np.concatenate(row_labels)
    if len(xa) == 0 or len(np.unique(ya)) < 2:
        raise ConfigError("shadow splits produced no usable attack rows")
    attack_cfg = TrainConfig(epochs=attack.epochs, batch_size=attack.batch_size, lr0=attack.lr,
                             weight_decay=0.0, clip=None, seed=attack.seed, hidden=attack.hidden,
                             n_features=x.shape[1] + 1)
    # constant learning rate for the attack net
    attack_net = _train_const_lr(xa, fa, ya, attack_cfg)

    xu = x[unknown_anom]
    a0 = forward(attack_net, *_attack_inputs(xu, forward(target, xu, 0), 0)) if len(xu) else np.zeros(0)
    a1 = forward(attack_net, *_attack_inputs(xu, forward(target, xu, 1), 1)) if len(xu) else np.zeros(0)
    guess = (np.asarray(a1) > np.asarray(a0)).astype(np.float64)

    truth = flags.unlock()[unknown_anom]
    success = float(np.mean(guess == truth)) if len(truth) else float("nan")
    baseline = majority_baseline(truth)
    if data.x_test is not None:
        score = auprc(forward(target, data.x_test, data.flags_test), data.labels_test)
    else:
        score = auprc(forward(target, x, flags.unlock()), labels)
    return AttackResult(success, baseline, score, len(truth), len(xa), shadow_cfgs, target)


def majority_baseline(flag_bits) -> float:
    """Accuracy of always guessing the more common flag bit."""
    flag_bits = np.asarray(flag_bits, dtype=np.float64)
    if len(flag_bits) == 0:
        return float("nan")
    p = float(np.mean(flag_bits != 0))
    return max(p, 1.0 - p)


def _train_const_lr(x, flags, labels, cfg: TrainConfig) -> MlpModel:
    model = MlpModel.init(cfg.sizes, Csprng(cfg.seed, "attack-model"))
    for epoch in range(1, cfg.epochs + 1):
        for idx in epoch_batches(len(x), cfg.batch_size, cfg.seed, epoch):
            u = clipped_sum(model, x[idx], flags[idx], labels[idx], 0.0, None)
            model = apply_update(model, u, cfg.lr0, len(idx))
    return model


# -- sweeps -------------------------------------------------------------------------


def sweep_tradeoff(grid: Sequence[NoiseSpec], alphas: Sequence[float], data: MiaData, cfg: TrainConfig,
                   seeds: Sequence[int] = (0,), attack: AttackConfig | None = None,
                   trainer: Trainer = central_trainer) -> list[dict]:
    """One target training and one attack per (noise, alpha, seed)."""
    if not grid:
        raise ConfigError("noise grid is empty")
    attack = attack or AttackConfig()
    out = []
    for noise in grid:
        for seed in seeds:
            run_cfg = replace(cfg, noise=noise, seed=seed)
            target = trainer(data.x, data.flags, data.labels, run_cfg)
            for alpha in alphas:
                res = run_mia(run_cfg, replace(attack, alpha=alpha, seed=seed), data, trainer, target)
                out.append({"noise_family": noise.family, "param": noise.param, "alpha": alpha,
                            "mia_success": res.success, "baseline": res.baseline,
                            "auprc": res.auprc, "seed": seed})
    return out


def write_tradeoff(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=TRADEOFF_COLUMNS, lineterminator="\r\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in TRADEOFF_COLUMNS})


def mean_by(rows: Sequence[dict], key: str, value: str) -> dict:
    groups: dict = {}
    for r in rows:
        groups.setdefault(r[key], []).append(r[value])
    return {k: float(np.mean(v)) for k, v in groups.items()}


def trend_violations(values: Sequence[float], slack: float) -> list[int]:
    """Indices i where values[i] exceeds values[i-1] by more than ``slack``."""
    return [i for i in range(1, len(values)) if values[i] > values[i - 1] + slack]


def inference_noise_sweep(model: MlpModel, x, labels, flags, sigmas: Sequence[float],
                          seed: int = 0) -> list[dict]:
    """AUPRC of direct and rounded scoring when the bank adds N(0, sigma) to the selected score."""
    s0 = forward(model, x, 0)
    s1 = forward(model, x, 1)
    sel = np.where(np.asarray(flags) == 1, s1, s0)
    out = []
    for sigma in sigmas:
        noise = NoiseSpec("gaussian", sigma).sample(Csprng(seed, "infer-sweep", repr(sigma)), sel.shape)
        raw = sel + noise
        out.append({"sigma": sigma,
                    "direct": auprc(apply_strategy(raw, s0, s1, "direct"), labels),
                    "round": auprc(apply_strategy(raw, s0, s1, "round"), labels)})
    return out
