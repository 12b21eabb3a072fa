"""Command-line entry point.

Subcommands: gen-data, train-centralized, train-federated, infer, attack-mia,
bench. Every subcommand takes ``--config`` (a TOML key-value file, flat or
with ``[dataset]``, ``[train]``, ``[pipeline]``, ``[session]``, ``[attack]``
and ``[sweep]`` tables) plus command-line overrides, and writes a
``manifest.json`` next to its outputs.

Exit codes: 0 ok, 2 usage, 3 configuration, 4 data or file I/O,
5 protocol or transport failure, 1 anything else. Errors are reported as
one JSON object on stderr.
"""
from __future__ import annotations

import argparse
import json
import platform
import sys
import time
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, config_hash, load_kv
from .data import (DataError, DatasetConfig, generate_synthetic, read_accounts, read_transactions,
                   write_accounts, write_transactions)
from .model import TrainConfig, auprc, forward, load_checkpoint, save_checkpoint, train_centralized
from .noise import NoiseSpec
from .ot import OtError
from .pipeline import PipelineConfig, prepare
from .transport import TransportError

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_PROTOCOL = 0, 1, 2, 3, 4, 5


# -- config helpers -----------------------------------------------------------------


def _section(values: dict, name: str) -> dict:
    """Keys of table ``name`` if present, else the top-level scalars."""
    if name in values and isinstance(values[name], dict):
        return dict(values[name])
    return {k: v for k, v in values.items() if not isinstance(v, dict)}


def _pick(cls, values: dict) -> dict:
    names = {f.name for f in fields(cls)}
    return {k: v for k, v in values.items() if k in names}


def train_config(values: dict) -> TrainConfig:
    v = _pick(TrainConfig, _section(values, "train"))
    if "clip" in v and (v["clip"] in (0, "off", "none", False)):
        v["clip"] = None
    if "noise" in v:
        v["noise"] = NoiseSpec.parse(str(v["noise"]))
    if "hidden" in v:
        v["hidden"] = tuple(v["hidden"])
    return TrainConfig(**v)


def _load_config(path) -> dict:
    return load_kv(path) if path else {}


def _versions() -> dict:
    import cryptography
    import gmpy2
    return {"fedanomaly": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "cryptography": cryptography.__version__, "gmpy2": gmpy2.version()}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, NoiseSpec):
        return str(obj)
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    return obj


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def write_manifest(out: Path, command: str, argv, config: dict, seeds: dict) -> None:
    config = _jsonable(config)
    write_json(out / "manifest.json", {"command": command, "argv": list(argv), "config": config,
                                       "config_hash": config_hash(config), "seeds": seeds,
                                       "versions": _versions()})


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _override(values: dict, table: str, key: str, value) -> None:
    if value is None:
        return
    if table in values and isinstance(values[table], dict):
        values[table][key] = value
    else:
        values[key] = value


def _load_data(args):
    data = Path(args.data)
    return read_transactions(data / "transactions.csv"), read_accounts(data / "accounts.csv")


# -- commands -----------------------------------------------------------------------


def cmd_gen_data(args) -> None:
    values = _load_config(args.config)
    ds = _section(values, "dataset")
    for key in ("n_transactions", "n_accounts", "n_banks", "seed"):
        if getattr(args, key) is not None:
            ds[key] = getattr(args, key)
    for key in ("anomaly_rate", "flag_correlation"):
        if getattr(args, key) is not None:
            ds[key] = getattr(args, key)
    cfg = DatasetConfig.from_mapping(_pick(DatasetConfig, ds))
    out = _out_dir(args)
    txs, accounts = generate_synthetic(cfg)
    write_transactions(txs, out / "transactions.csv")
    write_accounts(accounts, out / "accounts.csv")
    write_manifest(out, "gen-data", sys.argv[1:], asdict(cfg), {"dataset": cfg.seed})
    print(json.dumps({"transactions": len(txs), "accounts": len(accounts),
                      "anomalous": sum(t.label for t in txs)}))


def _prepare(args, values):
    pipe = PipelineConfig.from_mapping(_pick(PipelineConfig, _section(values, "pipeline")))
    txs, accounts = _load_data(args)
    return pipe, prepare(txs, accounts, pipe)


def _evaluate(model, split, flags=None) -> float | None:
    if len(split) == 0 or split.labels.sum() == 0:
        return None
    return auprc(forward(model, split.x, split.flags if flags is None else flags), split.labels)


def cmd_train_centralized(args) -> None:
    values = _load_config(args.config)
    _override(values, "train", "epochs", args.epochs)
    _override(values, "train", "seed", args.seed)
    cfg = train_config(values)
    pipe, prep = _prepare(args, values)
    out = _out_dir(args)
    res = train_centralized(prep.train.x, prep.train.flags, prep.train.labels, cfg)
    (out / "checkpoint.bin").write_bytes(save_checkpoint(res.model, prep.normalizer))
    metrics = {"auprc": _evaluate(res.model, prep.test), "train_auprc": _evaluate(res.model, prep.train),
               "epoch_losses": res.epoch_losses, "train_rows": len(prep.train), "test_rows": len(prep.test)}
    write_json(out / "metrics.json", metrics)
    write_manifest(out, "train-centralized", sys.argv[1:], {"train": asdict(cfg), "pipeline": asdict(pipe)},
                   {"train": cfg.seed, "pipeline": pipe.seed})
    print(json.dumps({"auprc": metrics["auprc"]}))


def session_config(values: dict, args):
    from .protocol import SessionConfig
    v = _pick(SessionConfig, _section(values, "session"))
    if getattr(args, "transport", None):
        v["transport"] = args.transport
    if getattr(args, "ot", None):
        v["ot_mode"] = args.ot
    if getattr(args, "ot_reduction", False):
        v["ot_reduction"] = True
    if getattr(args, "key_cache", False):
        v["key_cache"] = True
    if getattr(args, "base_port", None) is not None:
        v["base_port"] = args.base_port
    return SessionConfig(**v)


def cmd_train_federated(args) -> None:
    from .protocol import train
    values = _load_config(args.config)
    _override(values, "train", "epochs", args.epochs)
    _override(values, "train", "seed", args.seed)
    _override(values, "train", "noise", args.noise)
    cfg = train_config(values)
    session = session_config(values, args)
    pipe, prep = _prepare(args, values)
    out = _out_dir(args)
    if args.role:
        return _run_role(args, cfg, session, prep, out)
    t0 = time.perf_counter()
    res = train(prep.train.x, prep.train.labels, prep.train.banks, prep.train.accounts,
                prep.bank_accounts, cfg, session, flag_blind=args.flag_blind)
    elapsed = time.perf_counter() - t0
    _write_federated(out, res.model, prep, res.session, cfg, session, pipe, elapsed, args)


def _write_federated(out, model, prep, sess, cfg, session, pipe, elapsed, args):
    (out / "checkpoint.bin").write_bytes(save_checkpoint(model, prep.normalizer))
    metrics = {"auprc": _evaluate(model, prep.test), "train_auprc": _evaluate(model, prep.train),
               "seconds": elapsed, "batches": sess.rounds}
    write_json(out / "metrics.json", metrics)
    write_json(out / "comms.json", sess.comms_json())
    write_json(out / "leakage.json", sess.leakage.to_json())
    write_manifest(out, "train-federated", sys.argv[1:],
                   {"train": asdict(cfg), "session": asdict(session), "pipeline": asdict(pipe),
                    "flag_blind": bool(getattr(args, "flag_blind", False))},
                   {"train": cfg.seed, "pipeline": pipe.seed, "network": session.network_seed,
                    "hub": session.hub_seed, "aggregator": session.aggregator_seed, "bank": session.bank_seed})
    print(json.dumps({"auprc": metrics["auprc"], "ot_transfers": sess.ot_transfers,
                      "total_bytes": sess.comms.total_bytes}))


def _run_role(args, cfg, session, prep, out) -> None:
    """Run one party of a TCP session in this process (ports from ``base_port``)."""
    from .protocol import build_parties, training_plan
    from .protocol.session import _result
    from .transport import HUB, PartyId, TcpEndpoint, run_party_tcp
    if session.base_port == 0:
        raise ConfigError("--role needs a fixed base_port")
    me = PartyId.parse(args.role)
    plan = training_plan(prep.train.x, prep.train.labels, prep.train.banks, prep.train.accounts,
                         cfg, session, args.flag_blind)
    parties = build_parties(plan.script, prep.bank_accounts, session, cfg.seed, plan.noise,
                            plan.noise_scale, key_accounts=plan.key_accounts)
    if me not in parties:
        raise ConfigError(f"no party {me} in this session")
    addresses = {pid: (session.host, session.port_of(pid)) for pid in parties}
    t0 = time.perf_counter()
    with TcpEndpoint(me, addresses, timeout=session.timeout, max_payload=session.max_payload) as ep:
        run_party_tcp(parties[me], ep)
        counters = ep.counters
    if me == HUB:
        sess = _result(parties, counters)
        _write_federated(out, plan.state["model"], prep, sess, cfg, session, PipelineConfig(), 
                         time.perf_counter() - t0, args)


def cmd_infer(args) -> None:
    from .protocol import infer_batch
    from .features import HistoryStore, extract_all
    values = _load_config(args.config)
    session = session_config(values, args)
    noise = NoiseSpec.parse(args.noise or str(_section(values, "infer").get("noise", "none")))
    strategy = args.strategy or _section(values, "infer").get("strategy", "direct")
    model, norm = load_checkpoint(Path(args.model).read_bytes())
    if norm is None:
        raise ConfigError("checkpoint carries no normalization statistics")
    txs, accounts = _load_data(args)
    history = list(txs)
    if args.history:
        history += read_transactions(Path(args.history) / "transactions.csv")
    from .pipeline import bank_tables
    from .data import check_receivers, flag_bit
    names, tables = bank_tables(accounts)
    check_receivers(txs, names)
    index = {b: i for i, b in enumerate(names)}
    x = norm.transform(extract_all(txs, HistoryStore.build(history)))
    seed = int(args.seed if args.seed is not None else 0)
    res = infer_batch(model, x, [index[t.receiver_bank] for t in txs], [t.receiver_account for t in txs],
                      tables, strategy, noise, session, seed)
    out = _out_dir(args)
    with open(out / "scores.csv", "w", newline="", encoding="utf-8") as fh:
        import csv
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["tx_id", "score"])
        for t, s in zip(txs, res.scores):
            w.writerow([t.tx_id, "" if np.isnan(s) else f"{s:.9f}"])
    labels = np.array([t.label if t.label is not None else -1 for t in txs])
    metrics = {"rows": len(txs), "unknown_accounts": int(np.isnan(res.scores).sum())}
    ok = (labels >= 0) & ~np.isnan(res.scores)
    if ok.any() and labels[ok].sum() > 0:
        metrics["auprc"] = auprc(res.scores[ok], labels[ok])
    write_json(out / "metrics.json", metrics)
    write_json(out / "leakage.json", res.session.leakage.to_json())
    write_manifest(out, "infer", sys.argv[1:], {"strategy": strategy, "noise": str(noise),
                                                "session": asdict(session)}, {"infer": seed})
    print(json.dumps(metrics))


def cmd_attack_mia(args) -> None:
    from .privacy import AttackConfig, MiaData, mean_by, sweep_tradeoff, write_tradeoff
    values = _load_config(args.config)
    cfg = train_config(values)
    att = _pick(AttackConfig, _section(values, "attack"))
    if "hidden" in att:
        att["hidden"] = tuple(att["hidden"])
    attack = AttackConfig(**att)
    sweep = _section(values, "sweep")
    grid = [NoiseSpec.parse(s) for s in (args.grid or sweep.get("grid", "none")).split(",")]
    alphas = [float(a) for a in str(args.alphas or sweep.get("alphas", attack.alpha)).split(",")]
    seeds = [int(s) for s in str(args.seeds or sweep.get("seeds", cfg.seed)).split(",")]
    pipe, prep = _prepare(args, values)
    data = MiaData(prep.train.x, prep.train.labels, prep.train.flags, prep.train.accounts,
                   prep.test.x if len(prep.test) and prep.test.labels.sum() else None,
                   prep.test.labels, prep.test.flags)
    rows = sweep_tradeoff(grid, alphas, data, cfg, seeds, attack)
    out = _out_dir(args)
    write_tradeoff(rows, out / "tradeoff.csv")
    write_manifest(out, "attack-mia", sys.argv[1:],
                   {"train": asdict(cfg), "attack": asdict(attack), "pipeline": asdict(pipe),
                    "grid": [str(g) for g in grid], "alphas": alphas, "seeds": seeds},
                   {"seeds": seeds, "pipeline": pipe.seed})
    print(json.dumps({"rows": len(rows), "mia_success": mean_by(rows, "param", "mia_success")}))


def cmd_bench(args) -> None:
    from .bench import run_bench
    values = _load_config(args.config)
    out = _out_dir(args)
    report = run_bench(**_section(values, "bench"), **({"quick": True} if args.quick else {}))
    write_json(out / "bench.json", report)
    write_manifest(out, "bench", sys.argv[1:], _section(values, "bench"), {})
    print(json.dumps(report["seconds"]))


# -- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedanomaly", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def common(sp, data=True):
        sp.add_argument("--config", help="TOML key-value config file")
        sp.add_argument("--out", default=".", help="output directory")
        if data:
            sp.add_argument("--data", required=True, help="directory with transactions.csv and accounts.csv")
        return sp

    g = common(sub.add_parser("gen-data", help="write a synthetic dataset"), data=False)
    g.add_argument("--n-transactions", type=int)
    g.add_argument("--n-accounts", type=int)
    g.add_argument("--n-banks", type=int)
    g.add_argument("--anomaly-rate", type=float)
    g.add_argument("--flag-correlation", type=float)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    c = common(sub.add_parser("train-centralized", help="train with plaintext flags"))
    c.add_argument("--epochs", type=int)
    c.add_argument("--seed", type=int)
    c.set_defaults(func=cmd_train_centralized)

    f = common(sub.add_parser("train-federated", help="train through the hub/aggregator/bank protocol"))
    f.add_argument("--epochs", type=int)
    f.add_argument("--seed", type=int)
    f.add_argument("--transport", choices=("sim", "tcp"))
    f.add_argument("--ot", choices=("ideal", "crypto"))
    f.add_argument("--noise", help="none | gaussian:<mult> | laplace:<mult> (multiples of the clip bound)")
    f.add_argument("--ot-reduction", action="store_true", help="OT only for anomalous-labelled rows")
    f.add_argument("--key-cache", action="store_true", help="one key OT per account, then sealed pairs")
    f.add_argument("--flag-blind", action="store_true", help="ablation: always feed flag 0")
    f.add_argument("--role", help="run a single party over TCP: hub | aggregator | bank:<i>")
    f.add_argument("--base-port", type=int)
    f.set_defaults(func=cmd_train_federated)

    i = common(sub.add_parser("infer", help="score transactions with a trained checkpoint"))
    i.add_argument("--model", required=True, help="checkpoint file")
    i.add_argument("--history", help="directory whose transactions.csv extends the feature history")
    i.add_argument("--strategy", choices=("direct", "round"))
    i.add_argument("--noise", help="bank-side score noise: none | gaussian:<sigma> | laplace:<scale>")
    i.add_argument("--ot", choices=("ideal", "crypto"))
    i.add_argument("--seed", type=int)
    i.set_defaults(func=cmd_infer)

    a = common(sub.add_parser("attack-mia", help="flag-inference attack and privacy/utility sweep"))
    a.add_argument("--grid", help="comma-separated noise specs, e.g. none,gaussian:0.1")
    a.add_argument("--alphas", help="comma-separated known-account fractions")
    a.add_argument("--seeds", help="comma-separated seeds")
    a.set_defaults(func=cmd_attack_mia)

    b = common(sub.add_parser("bench", help="component timings"), data=False)
    b.add_argument("--quick", action="store_true")
    b.set_defaults(func=cmd_bench)
    return p


def _fail(code: int, exc: BaseException) -> int:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    from .protocol import ProtocolError
    try:
        args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except (DataError, OSError, UnicodeDecodeError) as exc:
        return _fail(EXIT_DATA, exc)
    except (ProtocolError, TransportError, OtError) as exc:
        return _fail(EXIT_PROTOCOL, exc)
    except Exception as exc:  # noqa: BLE001 - reported as JSON, not a traceback
        return _fail(EXIT_ERROR, exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
