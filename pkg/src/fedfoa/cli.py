"""Command-line entry point: ``fedfoa {train,probe,heatmap,embed,check,commcost}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import checks
from .config import ConfigError, RunConfig, apply_overrides, config_keys
from .correlation import mean_pairwise_distance
from .data import DatasetError, partition_iid
from .evaluation import export_embeddings, export_heatmap_data, linear_probe, make_probe_evaluator
from .federation import (
    TrainingError,
    build_datasets,
    comm_cost,
    history_to_csv,
    history_to_ndjson,
    records_from_ndjson,
    records_to_ndjson,
    run_training,
)
from .linalg import LinalgError
from .ssl import load_checkpoint, save_checkpoint

log = logging.getLogger("fedfoa")


def _add_config_flags(p: argparse.ArgumentParser, skip=()):
    p.add_argument("--config", help="flat key = value config file")
    group = p.add_argument_group("config overrides")
    for key in config_keys():
        if key in skip:
            continue
        group.add_argument("--" + key.replace("_", "-"), dest=f"cfg:{key}", metavar="VALUE")


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg:") and v is not None}
    return apply_overrides(cfg, overrides).validate()


def _write(path: Path, text: str | bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(text, bytes):
        path.write_bytes(text)
    else:
        path.write_text(text)


def _emit(text: str, out: str | None):
    if out:
        _write(Path(out), text)
    else:
        sys.stdout.write(text)


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    train, test = build_datasets(cfg)
    partitions = partition_iid(train.unlabeled(), cfg.num_clients, cfg.seed)
    evaluator = None
    if not args.no_probe:
        evaluator = make_probe_evaluator(train, test, cfg.probe_epochs, cfg.probe_lr)
    run = run_training(cfg, partitions, evaluator,
                       on_round=lambda rep: log.info("round %d done in %.2fs", rep.round, rep.wall_time))
    _write(out / "config.txt", cfg.to_text())
    _write(out / "history.ndjson", history_to_ndjson(run.history))
    _write(out / "metrics.csv", history_to_csv(run.history))
    _write(out / "records.ndjson", records_to_ndjson(run.records))
    for client in run.clients:
        _write(out / "checkpoints" / f"client{client.client_id}.foam", save_checkpoint(client.model))
    if run.history:
        last = run.history[-1]
        acc = last.mean_probe()
        print(f"rounds={len(run.history)} mean_trace={last.mean_trace():.4f} "
              f"mean_distance={mean_pairwise_distance(run.records[last.round]):.4f}"
              + (f" mean_probe={acc:.4f}" if acc is not None else ""))
    print(f"wrote {out}")
    return 0


def _load_model(path):
    try:
        return load_checkpoint(Path(path).read_bytes())
    except OSError as exc:
        raise ValueError(f"cannot read checkpoint {path}: {exc}") from None


def cmd_probe(args) -> int:
    cfg = _resolve_config(args)
    model = _load_model(args.checkpoint)
    train, test = build_datasets(cfg)
    acc = linear_probe(model, train, test, cfg.probe_epochs, cfg.probe_lr, args.features)
    print(f"accuracy={acc:.4f}")
    return 0


def cmd_heatmap(args) -> int:
    try:
        records = records_from_ndjson(Path(args.records).read_text())
    except OSError as exc:
        raise ValueError(f"cannot read records {args.records}: {exc}") from None
    rounds = [int(t) for t in args.rounds.split(",")] if args.rounds else sorted(records)
    _emit(export_heatmap_data(records, rounds), args.out)
    return 0


def cmd_embed(args) -> int:
    cfg = _resolve_config(args)
    model = _load_model(args.checkpoint)
    _, test = build_datasets(cfg)
    count = len(test) if args.count is None else args.count
    _emit(export_embeddings(model, test, count, args.sample_seed, args.features), args.out)
    return 0


def cmd_check(args) -> int:
    results = checks.run_all(args.suite or None)
    for res in results:
        print(res.summary())
        for label in res.failures[:5]:
            print(f"  failed: {label}")
    return 0 if all(r.ok for r in results) else 1


def cmd_commcost(args) -> int:
    cfg = _resolve_config(args)
    round_wise = comm_cost(cfg, "round-wise")
    batch_wise = comm_cost(cfg, "batch-wise")
    print(f"projection_dim={cfg.projection_dim} batches_per_round={cfg.batches_per_round}")
    print(f"round-wise bytes/client/round={round_wise}")
    print(f"batch-wise bytes/client/round={batch_wise}")
    print(f"ratio={batch_wise // round_wise}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedfoa", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run federated training and write history + checkpoints")
    _add_config_flags(p, skip=("seed",))
    p.add_argument("--seed", dest="cfg:seed", required=True, metavar="INT")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--no-probe", action="store_true", help="skip periodic linear probes")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("probe", help="linear-probe accuracy of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--features", choices=("backbone", "projection"), default="backbone")
    _add_config_flags(p)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("heatmap", help="pairwise R distance CSV from a records file")
    p.add_argument("records", help="records.ndjson written by train")
    p.add_argument("--rounds", help="comma-separated rounds (default: all)")
    p.add_argument("--out", help="output CSV (default: stdout)")
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("embed", help="embedding CSV for test samples")
    p.add_argument("checkpoint")
    p.add_argument("--count", type=int, help="number of samples (default: whole test set)")
    p.add_argument("--sample-seed", type=int, default=0)
    p.add_argument("--features", choices=("backbone", "projection"), default="projection")
    p.add_argument("--out", help="output CSV (default: stdout)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("check", help="run the numerical oracle suites")
    p.add_argument("--suite", action="append", choices=sorted(checks.SUITES))
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("commcost", help="bytes uploaded per client per round")
    _add_config_flags(p)
    p.set_defaults(func=cmd_commcost)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed the diagnostic
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetError, TrainingError, LinalgError, ValueError, KeyError) as exc:
        print(f"fedfoa {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
