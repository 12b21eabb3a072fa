"""Numpy MLP with per-sample gradients, norm clipping, SGD and AUPRC.

Input is the 17 normalized features followed by the flag bit; hidden layers
use ReLU, the single output a sigmoid, and the loss is binary cross-entropy.
Per-sample updates carry the weight-decay term ``wd * theta`` so that a
batch update is the plain sum of per-sample updates.

Parameters flatten layer by layer, weight matrix (shape ``(fan_in,
fan_out)``, row-major) then bias.
"""
from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .config import ConfigError
from .features import Normalizer
from .noise import NoiseSpec
from .rng import Csprng, derive_seed, seed_from_int

N_INPUT = 18
HIDDEN = (256, 64, 16)
CHECKPOINT_MAGIC = b"FAMLPCK1"
CHECKPOINT_VERSION = 1
_CHUNK_ELEMS = 1 << 23  # per-sample gradient chunking, ~64 MB of float64


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 4092
    lr0: float = 5e-2
    weight_decay: float = 5e-4
    clip: float | None = 100.0
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    seed: int = 0
    hidden: tuple[int, ...] = HIDDEN
    n_features: int = N_INPUT - 1

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if isinstance(self.noise, str):
            self.noise = NoiseSpec.parse(self.noise)
        if self.epochs < 1 or self.batch_size < 1 or not self.lr0 > 0:
            raise ConfigError("epochs, batch_size and lr0 must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.clip is not None and not self.clip > 0:
            raise ConfigError("clip must be positive or None")
        if self.noise.active and self.clip is None:
            raise ConfigError("training noise is scaled by the clip bound; set clip")

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.n_features + 1, *self.hidden, 1)

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``."""
        return self.lr0 / math.sqrt(epoch)


class MlpModel:
    def __init__(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]):
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64).reshape(-1) for b in biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or w.shape[1] != b.shape[0]:
                raise ValueError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i}: input size {w.shape[0]} does not match previous layer")

    @classmethod
    def init(cls, sizes: Sequence[int], rng: Csprng) -> MlpModel:
        """He-uniform weights (limit sqrt(6 / fan_in)), zero biases."""
        weights, biases = [], []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            limit = math.sqrt(6.0 / fan_in)
            u = rng.fork("init", i).uniform((fan_in, fan_out))
            weights.append((2.0 * u - 1.0) * limit)
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @classmethod
    def zeros(cls, sizes: Sequence[int]) -> MlpModel:
        return cls([np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
                   [np.zeros(b) for b in sizes[1:]])

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0], *(w.shape[1] for w in self.weights))

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def layer_slices(self):
        """(weight slice, bias slice) into the flat parameter vector, per layer."""
        out, off = [], 0
        for w, b in zip(self.weights, self.biases):
            ws = slice(off, off + w.size)
            off += w.size
            bs = slice(off, off + b.size)
            off += b.size
            out.append((ws, bs))
        return out

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([p for w, b in zip(self.weights, self.biases) for p in (w.ravel(), b)])

    def with_params(self, theta: np.ndarray) -> MlpModel:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got shape {theta.shape}")
        weights, biases = [], []
        for (ws, bs), w in zip(self.layer_slices(), self.weights):
            weights.append(theta[ws].reshape(w.shape))
            biases.append(theta[bs])
        return MlpModel(weights, biases)

    def copy(self) -> MlpModel:
        return MlpModel(self.weights, self.biases)

    def __eq__(self, other) -> bool:
        return (isinstance(other, MlpModel) and self.sizes == other.sizes
                and np.array_equal(self.params, other.params))


def with_flag(x: np.ndarray, flag) -> np.ndarray:
    """Append the flag bit as the last input column."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    flag = np.broadcast_to(np.asarray(flag, dtype=np.float64), (x.shape[0],))
    return np.concatenate([x, flag[:, None]], axis=1)


def _logits(m: MlpModel, inputs: np.ndarray) -> np.ndarray:
    a = inputs
    for w, b in zip(m.weights[:-1], m.biases[:-1]):
        a = np.maximum(a @ w + b, 0.0)
    return (a @ m.weights[-1] + m.biases[-1])[:, 0]


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def forward(m: MlpModel, x, flag_guess=0):
    """Confidence that the transaction is anomalous, given a guess of the flag bit.

    ``x`` is one feature vector (returns a float) or a matrix (returns an array).
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite model input")
    s = sigmoid(_logits(m, with_flag(x, flag_guess)))
    return float(s[0]) if x.ndim == 1 else s


def bce_loss(m: MlpModel, x, flags, labels) -> float:
    z = _logits(m, with_flag(x, flags))
    y = np.asarray(labels, dtype=np.float64)
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


def _backprop(m: MlpModel, inputs: np.ndarray, labels: np.ndarray):
    """Layer inputs and output-side deltas for each layer (per sample)."""
    acts = [inputs]
    pre = []
    a = inputs
    for w, b in zip(m.weights, m.biases):
        h = a @ w + b
        pre.append(h)
        a = np.maximum(h, 0.0)
        acts.append(a)
    delta = (sigmoid(pre[-1][:, 0]) - labels)[:, None]
    deltas = [delta]
    for i in range(len(m.weights) - 1, 0, -1):
        delta = (delta @ m.weights[i].T) * (pre[i - 1] > 0)
        deltas.append(delta)
    deltas.reverse()
    return acts[:-1], deltas


def per_sample_gradients(m: MlpModel, x, flags, labels, weight_decay: float = 0.0,
                         out: np.ndarray | None = None) -> np.ndarray:
    """Matrix (n, P) of per-sample BCE gradients plus ``weight_decay * theta``."""
    inputs = with_flag(x, flags)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    n = inputs.shape[0]
    if out is None:
        out = np.empty((n, m.n_params))
    acts, deltas = _backprop(m, inputs, labels)
    for (ws, bs), a, d, w, b in zip(m.layer_slices(), acts, deltas, m.weights, m.biases):
        gw = out[:, ws].reshape(n, *w.shape)
        np.multiply(a[:, :, None], d[:, None, :], out=gw)
        gb = out[:, bs]
        gb[...] = d
        if weight_decay:
            gw += weight_decay * w
            gb += weight_decay * b
    return out


def per_sample_gradient(m: MlpModel, x, flag_guess, label, weight_decay: float = 0.0) -> np.ndarray:
    return per_sample_gradients(m, np.atleast_2d(x), [flag_guess], [label], weight_decay)[0]


def clip(g: np.ndarray, bound: float | None) -> np.ndarray:
    """Scale ``g`` (or each row of ``g``) down to L2 norm ``bound`` when larger."""
    if bound is None:
        return g
    if not bound > 0:
        raise ValueError("clip bound must be positive")
    g = np.asarray(g, dtype=np.float64)
    norms = np.linalg.norm(g, axis=-1, keepdims=True)
    return g * np.minimum(1.0, bound / np.maximum(norms, 1e-300))


def clipped_gradients(m: MlpModel, x, flags, labels, weight_decay: float, bound: float | None,
                      out: np.ndarray | None = None) -> np.ndarray:
    """Per-sample updates, clipped in place."""
    g = per_sample_gradients(m, x, flags, labels, weight_decay, out=out)
    if bound is not None:
        norms = np.sqrt(np.einsum("ij,ij->i", g, g))
        g *= np.minimum(1.0, bound / np.maximum(norms, 1e-300))[:, None]
    return g


def per_sample_norms(m: MlpModel, x, flags, labels, weight_decay: float = 0.0) -> np.ndarray:
    """L2 norms of per-sample updates without materializing them.

    Per layer, the weight part of a sample's update is ``a d^T + wd W``, whose
    squared norm is ``|a|^2 |d|^2 + 2 wd a^T W d + wd^2 |W|^2``; the bias part
    is handled the same way.
    """
    inputs = with_flag(x, flags)
    acts, deltas = _backprop(m, inputs, np.asarray(labels, dtype=np.float64).reshape(-1))
    return np.sqrt(_norms_sq(m, acts, deltas, weight_decay))


def _norms_sq(m, acts, deltas, wd):
    total = 0.0
    for a, d, w, b in zip(acts, deltas, m.weights, m.biases):
        dd = np.einsum("ij,ij->i", d, d)
        total = total + np.einsum("ij,ij->i", a, a) * dd + dd
        if wd:
            total = total + 2 * wd * (np.einsum("ij,ij->i", a @ w, d) + d @ b)
            total = total + wd * wd * (np.sum(w * w) + b @ b)
    return np.maximum(total, 0.0)


def clipped_sum(m: MlpModel, x, flags, labels, weight_decay: float = 0.0,
                bound: float | None = None) -> np.ndarray:
    """Sum of clipped per-sample updates, computed with one backward pass."""
    inputs = with_flag(x, flags)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if inputs.shape[0] == 0:
        return np.zeros(m.n_params)
    acts, deltas = _backprop(m, inputs, labels)
    if bound is None:
        scale = np.ones(inputs.shape[0])
    else:
        norms = np.sqrt(_norms_sq(m, acts, deltas, weight_decay))
        scale = np.minimum(1.0, bound / np.maximum(norms, 1e-300))
    total = scale.sum()
    parts = []
    for a, d, w, b in zip(acts, deltas, m.weights, m.biases):
        ds = d * scale[:, None]
        parts.append((a.T @ ds + weight_decay * total * w).ravel())
        parts.append(ds.sum(axis=0) + weight_decay * total * b)
    return np.concatenate(parts)


def apply_update(m: MlpModel, u: np.ndarray, lr: float, batch_size: int = 1) -> MlpModel:
    """theta - lr * u / batch_size, with ``u`` the summed (possibly noised) batch update."""
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (m.n_params,):
        raise ValueError(f"update has shape {u.shape}, model has {m.n_params} parameters")
    return m.with_params(m.params - (lr / batch_size) * u)


def auprc(scores, labels) -> float:
    """Average precision: sum over distinct score thresholds of recall gain times precision.

    Tied scores form a single threshold.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("AUPRC needs at least one positive label")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    # last index of each tie group
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp_at = tp[ends]
    precision = tp_at / (ends + 1)
    recall_gain = np.diff(np.r_[0, tp_at]) / n_pos
    return float(np.sum(recall_gain * precision))


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled index batches for one epoch, shared by all trainers."""
    perm = Csprng(seed, "shuffle", epoch).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def batch_sid(seed: int, epoch: int, batch: int) -> bytes:
    return derive_seed(seed_from_int(seed), "train", epoch, batch)[:16]


@dataclass
class TrainResult:
    model: MlpModel
    epoch_losses: list[float]


def train_centralized(x: np.ndarray, flags, labels, cfg: TrainConfig,
                      model: MlpModel | None = None,
                      on_epoch: Callable[[int, MlpModel], None] | None = None) -> TrainResult:
    """SGD with the true flag bit as the 18th input.

    Each batch update is the sum of clipped per-sample updates plus noise of
    width ``cfg.noise.param * cfg.clip``, divided by the nominal batch size.
    """
    x = np.asarray(x, dtype=np.float64)
    flags = np.asarray(flags, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if model is None:
        model = MlpModel.init(cfg.sizes, Csprng(cfg.seed, "model"))
    noise_rng = Csprng(cfg.seed, "central-noise")
    losses = []
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        for j, idx in enumerate(epoch_batches(len(x), cfg.batch_size, cfg.seed, epoch)):
            u = clipped_sum(model, x[idx], flags[idx], labels[idx], cfg.weight_decay, cfg.clip)
            if cfg.noise.active:
                u = u + cfg.noise.sample(noise_rng.fork(epoch, j), u.shape, scale=cfg.clip)
            model = apply_update(model, u, lr, cfg.batch_size)
        losses.append(bce_loss(model, x, flags, labels))
        if on_epoch:
            on_epoch(epoch, model)
    return TrainResult(model, losses)


def save_checkpoint(model: MlpModel, normalizer=None) -> bytes:
    """magic | u16 version | u16 n_dims | u32 dims | f64 params | u32 len | normalizer."""
    buf = io.BytesIO()
    sizes = model.sizes
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<HH", CHECKPOINT_VERSION, len(sizes)))
    buf.write(struct.pack(f"<{len(sizes)}I", *sizes))
    buf.write(model.params.astype("<f8").tobytes())
    extra = normalizer.to_bytes() if normalizer is not None else b""
    buf.write(struct.pack("<I", len(extra)))
    buf.write(extra)
    return buf.getvalue()


def load_checkpoint(data: bytes):
    """Inverse of :func:`save_checkpoint`; returns (model, normalizer or None)."""
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not a model checkpoint")
    version, n = struct.unpack_from("<HH", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 12
    sizes = struct.unpack_from(f"<{n}I", data, off)
    off += 4 * n
    model = MlpModel.zeros(sizes)
    count = model.n_params
    theta = np.frombuffer(data, dtype="<f8", count=count, offset=off).astype(np.float64)
    off += 8 * count
    (extra,) = struct.unpack_from("<I", data, off)
    off += 4
    if len(data) != off + extra:
        raise ValueError("checkpoint length mismatch")
    norm = Normalizer.from_bytes(data[off:]) if extra else None
    return model.with_params(theta), norm
