"""Component timings: feature extraction, SGD, OT, secret sharing and framing."""
from __future__ import annotations

import time

import numpy as np

from .data import DatasetConfig, generate_synthetic
from .features import extract_all
from .model import MlpModel, TrainConfig, clipped_gradients, clipped_sum
from .ot import OtStats, run_ot
from .ring import encode_array
from .rng import Csprng
from .sharing import share, reconstruct
from .ring import FixedVector
from .transport import HUB, MsgType, ProtocolMessage, decode_frame, encode_frame


def _timed(fn, repeat: int = 1) -> float:
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t0) / repeat


def run_bench(n_transactions: int = 20_000, batch_size: int = 4092, ot_transfers: int = 20,
              seed: int = 0, quick: bool = False) -> dict:
    if quick:
        n_transactions, batch_size, ot_transfers = 2_000, 256, 4
    rng = Csprng(seed, "bench")
    txs, _ = generate_synthetic(DatasetConfig(n_transactions=n_transactions, n_accounts=max(50, n_transactions // 25),
                                              seed=seed))
    seconds = {}
    seconds["feature_extraction"] = _timed(lambda: extract_all(txs))

    cfg = TrainConfig()
    model = MlpModel.init(cfg.sizes, rng.fork("model"))
    gen = rng.numpy_generator()
    x = gen.normal(size=(batch_size, 17))
    y = (gen.random(batch_size) < 0.1).astype(float)
    f = (gen.random(batch_size) < 0.5).astype(float)
    seconds["sgd_batch_clipped_sum"] = _timed(lambda: clipped_sum(model, x, f, y, cfg.weight_decay, cfg.clip))
    rows = min(batch_size, 128)
    seconds["per_sample_updates_per_row"] = _timed(
        lambda: (clipped_gradients(model, x[:rows], 0.0, y[:rows], cfg.weight_decay, cfg.clip),
                 clipped_gradients(model, x[:rows], 1.0, y[:rows], cfg.weight_decay, cfg.clip))) / rows

    dim = model.n_params
    vec = encode_array(gen.normal(size=dim))
    msg = vec.astype("<u8").tobytes()
    stats = OtStats()
    pairs = [(msg, msg)] * ot_transfers
    choices = [i % 2 for i in range(ot_transfers)]
    seconds["crypto_ot_per_transfer"] = _timed(
        lambda: run_ot(bytes(16), pairs, choices, rng.fork("s"), rng.fork("r"), "crypto", stats)) / ot_transfers
    seconds["ideal_ot_per_transfer"] = _timed(
        lambda: run_ot(bytes(16), pairs, choices, rng.fork("s"), rng.fork("r"), "ideal")) / ot_transfers

    fv = FixedVector(vec)
    seconds["share_reconstruct"] = _timed(lambda: reconstruct(*share(fv, rng.fork("share"))), repeat=10)

    frame_msg = ProtocolMessage(bytes(16), HUB, MsgType.MASKED_PAIR, msg * 2)
    frame = encode_frame(frame_msg)
    seconds["frame_encode"] = _timed(lambda: encode_frame(frame_msg), repeat=10)
    seconds["frame_decode"] = _timed(lambda: decode_frame(frame), repeat=10)
    return {"seconds": seconds,
            "params": {"n_transactions": n_transactions, "batch_size": batch_size, "ot_transfers": ot_transfers,
                       "model_params": dim, "frame_bytes": len(frame)}}
