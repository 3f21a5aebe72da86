"""Command-line surface: run experiments, inspect partitions, audit
privacy with the gradient-inversion attack, and emit the generator
diversity visualization.

Subcommands::

    fedmdcg run             --config exp.toml [--override k=v ...]
    fedmdcg partition-stats --config exp.toml
    fedmdcg attack          --config exp.toml --checkpoint DIR --client-id 0
    fedmdcg toyviz          --config exp.toml

All outputs land under the experiment's output directory; repeated runs
with identical configs produce byte-identical metric CSVs.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .attack import METHOD_TARGETS, AttackConfig, dlg_attack
from .baselines import run_baseline
from .config import METHODS, ConfigError, ExperimentFile, load_experiment
from .data import FormatError, count_labels
from .evaluation import (toy_divloss_pipeline, write_metrics_csv,
                         write_rows_csv)
from .models import (ClientModel, deserialize_params, init_classifier,
                     init_extractor, serialize_params)
from .protocol import (AGG_MODES, build_datasets, build_model_spec,
                       partition_with_retry, run_protocol)
from .rng import RngStream


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedmdcg",
        description="Deterministic federated-distillation simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment TOML file")
        p.add_argument("--override", action="append", default=[],
                       metavar="KEY=VALUE",
                       help="override a config entry (repeatable)")

    run = sub.add_parser("run", help="run an experiment over its seeds")
    common(run)
    run.add_argument("--method", choices=METHODS,
                     help="override the experiment method")
    run.add_argument("--agg", choices=AGG_MODES,
                     help="override the aggregation manner")
    run.add_argument("--seeds", help="comma-separated seed list override")

    stats = sub.add_parser("partition-stats",
                           help="per-client per-class sample counts")
    common(stats)

    atk = sub.add_parser("attack", help="gradient-inversion audit")
    common(atk)
    atk.add_argument("--checkpoint", required=True,
                     help="checkpoint directory written by `run`")
    atk.add_argument("--client-id", type=int, default=0)

    viz = sub.add_parser("toyviz", help="generator diversity visualization CSV")
    common(viz)
    return parser


def _load(args) -> ExperimentFile:
    overrides = list(args.override)
    if getattr(args, "method", None):
        overrides.append(f"experiment.method={args.method}")
    if getattr(args, "agg", None):
        overrides.append(f"protocol.agg={args.agg}")
    exp = load_experiment(args.config, overrides)
    if getattr(args, "seeds", None):
        try:
            exp.seeds = [int(s) for s in args.seeds.split(",") if s]
        except ValueError as err:
            raise ConfigError(f"bad --seeds value {args.seeds!r}") from err
        if not exp.seeds:
            raise ConfigError("--seeds produced an empty list")
    return exp


def _checkpoint_paths(out: Path, seed: int) -> Path:
    return out / "checkpoints" / f"seed{seed}"


def _write_checkpoints(ckpt_dir: Path, capture: dict) -> None:
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    for state in capture["clients"]:
        cid = state.client_id
        (ckpt_dir / f"client{cid}_extractor.bin").write_bytes(
            serialize_params(state.model.extractor))
        (ckpt_dir / f"client{cid}_classifier.bin").write_bytes(
            serialize_params(state.model.classifier))
        if state.generator is not None:
            (ckpt_dir / f"client{cid}_generator.bin").write_bytes(
                serialize_params(state.generator))
    if "global_generator" in capture:
        (ckpt_dir / "global_generator.bin").write_bytes(
            serialize_params(capture["global_generator"]))
        (ckpt_dir / "global_classifier.bin").write_bytes(
            serialize_params(capture["global_classifier"]))


def cmd_run(args) -> int:
    exp = _load(args)
    out = Path(exp.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    finals = []
    for seed in exp.seeds:
        config = exp.run_config(seed)
        capture: dict = {}
        if exp.method == "fedmdcg":
            log = run_protocol(config, capture=capture)
        else:
            log = run_baseline(exp.method, config, capture=capture)
        csv_path = out / f"metrics_seed{seed}.csv"
        write_metrics_csv(csv_path, log)
        _write_checkpoints(_checkpoint_paths(out, seed), capture)
        if log.aborted is not None:
            print(f"seed {seed}: aborted: {log.aborted}", file=sys.stderr)
            print(f"partial metrics retained at {csv_path}", file=sys.stderr)
            return 3
        final = log.final()
        finals.append(final)
        print(f"seed {seed}: local_acc={final.local_acc:.4f} "
              f"global_acc={final.global_acc:.4f} -> {csv_path}")
    rows = []
    for metric in ("local_acc", "global_acc", "gd_loss"):
        values = np.array([getattr(f, metric) for f in finals])
        rows.append([metric, float(values.mean()), float(values.std())])
    summary = out / "summary.csv"
    write_rows_csv(summary, ["metric", "mean", "pstd"], rows)
    print(f"summary -> {summary}")
    return 0


def cmd_partition_stats(args) -> int:
    exp = _load(args)
    config = exp.run_config(exp.seeds[0])
    train, _ = build_datasets(config)
    parts = partition_with_retry(train, config)
    header = (["client"] + [f"class{y}" for y in range(train.class_count)]
              + ["total"])
    rows = []
    for cid, idx in enumerate(parts):
        counts = count_labels(train, idx).counts
        rows.append([cid] + [int(v) for v in counts] + [int(counts.sum())])
    out = Path(exp.output_dir)
    path = out / "partition_stats.csv"
    write_rows_csv(path, header, rows)
    print(f"partition stats -> {path}")
    return 0


def cmd_attack(args) -> int:
    exp = _load(args)
    if exp.method not in METHOD_TARGETS:
        raise ConfigError(f"method {exp.method!r} shares no parameters; "
                          f"nothing for an attacker to observe")
    seed = exp.seeds[0]
    config = exp.run_config(seed)
    ckpt = Path(args.checkpoint)
    if not ckpt.is_dir():
        raise FileNotFoundError(f"checkpoint directory not found: {ckpt}")

    train, _ = build_datasets(config)
    spec = build_model_spec(config, train)
    parts = partition_with_retry(train, config)
    cid = args.client_id
    if not 0 <= cid < config.clients:
        raise ConfigError(f"client id {cid} outside [0, {config.clients})")

    like_ext = init_extractor(spec, RngStream("init/extractor", seed))
    like_clf = init_classifier(spec, RngStream("init/classifier", seed))
    try:
        model = ClientModel(
            deserialize_params((ckpt / f"client{cid}_extractor.bin").read_bytes(),
                               like=like_ext),
            deserialize_params((ckpt / f"client{cid}_classifier.bin").read_bytes(),
                               like=like_clf))
    except FileNotFoundError as err:
        raise FileNotFoundError(f"missing checkpoint file: {err.filename}") from err

    atk = dict(exp.attack)
    secret_size = atk.pop("secret_size", 1)
    cfg = AttackConfig(
        steps=atk.get("steps", 300), lr=atk.get("lr", 0.1),
        bounds=(atk.get("bound_low", 0.0), atk.get("bound_high", 1.0)),
        target=METHOD_TARGETS[exp.method], seed=seed)
    picker = RngStream("attack/secret", seed)
    idx = picker.choice(parts[cid], secret_size, replace=False)
    result = dlg_attack(spec, model, train.images[idx], train.labels[idx], cfg)

    out = Path(exp.output_dir)
    path = out / "attack.csv"
    write_rows_csv(path, ["client", "psnr", "match_loss"],
                   [[cid, result.psnr_db, result.match_loss]])
    print(f"client {cid}: target={cfg.target} psnr={result.psnr_db:.2f} dB "
          f"match_loss={result.match_loss:.3e} -> {path}")
    return 0


def cmd_toyviz(args) -> int:
    exp = _load(args)
    config = exp.run_config(exp.seeds[0])
    train, test = build_datasets(config)
    spec = build_model_spec(config, train)
    tv = dict(exp.toyviz)
    raw_variant = tv.pop("variant", "2")
    variant = None if raw_variant == "none" else int(raw_variant)
    result = toy_divloss_pipeline(train, test, spec, variant, exp.seeds[0],
                                  **tv)
    out = Path(exp.output_dir)
    path = out / "toyviz.csv"
    write_rows_csv(path, ["kind", "label", "pc1", "pc2"], result.rows)
    print(f"toyviz ({len(result.rows)} rows, "
          f"within-class spread {result.generated_spread:.4f}) -> {path}")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    handlers = {
        "run": cmd_run,
        "partition-stats": cmd_partition_stats,
        "attack": cmd_attack,
        "toyviz": cmd_toyviz,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, FormatError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
