"""Command-line drivers for the full pipeline.

Subcommands: gen-data, train-source, serve, dump-preds, adapt, eval, ablate,
sweep.  Adaptation flags mirror AdaptConfig; --config points at a JSON file
with the same keys, and explicit flags override file values.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

from .backbone import load_checkpoint, save_checkpoint
from .data import ShiftSpec, generate, load_manifest
from .distill import save_bank
from .errors import BlackvidError, ConfigError
from .oracle import SourceTrainConfig, dump_predictions, start_service, train_source
from .trainer import (AdaptConfig, RunReport, adapt, evaluate, run_ablation_suite,
                      sweep, write_metrics)

_ADAPT_FIELDS = {f.name: f.type for f in fields(AdaptConfig)}
_FLAG_FIELDS = ("endo", "exo", "vir", "pre", "mi", "clip_weights")


def _add_adapt_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file with AdaptConfig keys")
    p.add_argument("--alpha-v", type=float, dest="alpha_v")
    p.add_argument("--alpha-t", type=float, dest="alpha_t")
    p.add_argument("--beta-reg", type=float, dest="beta_reg")
    p.add_argument("--top-c", type=int, dest="top_c")
    p.add_argument("--gamma-ema", type=float, dest="gamma_ema")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--momentum", type=float)
    p.add_argument("--teacher-mode", choices=("soft", "hard"), dest="teacher_mode")
    p.add_argument("--symmetric-grad", action="store_true", default=None, dest="symmetric_grad")
    p.add_argument("--seed", type=int)
    for flag in _FLAG_FIELDS:
        p.add_argument(f"--no-{flag.replace('_', '-')}", action="store_false",
                       default=None, dest=flag)


def _build_adapt_config(args) -> AdaptConfig:
    values: dict = {}
    if args.config is not None:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config file {args.config}: {e}") from None
        unknown = set(loaded) - set(_ADAPT_FIELDS)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        values.update(loaded)
    for name in _ADAPT_FIELDS:
        cli_val = getattr(args, name, None)
        if cli_val is not None:
            values[name] = cli_val
    return AdaptConfig(**values)


def _cmd_gen_data(args) -> int:
    partial = None
    if args.partial:
        partial = tuple(int(x) for x in args.partial.split(","))
    spec = ShiftSpec(
        num_classes=args.classes, frames=args.frames, dim=args.dim,
        videos_per_class=args.videos_per_class, rotation=args.rotation,
        translation=args.translation, source_noise=args.source_noise,
        target_noise=args.target_noise, temporal_dependence=args.temporal_dependence,
        partial_target_classes=partial)
    gen = generate(spec, args.seed, args.out)
    print(json.dumps({"source_manifest": str(gen.source_manifest),
                      "target_manifest": str(gen.target_manifest)}))
    return 0


def _cmd_train_source(args) -> int:
    manifest = load_manifest(args.manifest, require_labels=True)
    cfg = SourceTrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                            learning_rate=args.learning_rate, seed=args.seed)
    model, report = train_source(manifest, cfg)
    save_checkpoint(model, args.out)
    print(json.dumps({"checkpoint": str(args.out),
                      "holdout_accuracy": report["holdout_accuracy"],
                      "train_accuracy": report["train_accuracy"]}))
    return 0


def _cmd_serve(args) -> int:
    model = load_checkpoint(args.model)
    service = start_service(model, host=args.host, port=args.port)
    print(json.dumps({"url": service.url, "classes": model.num_classes,
                      "frames": model.k, "dim": model.frame_dim}), flush=True)
    try:
        service._thread.join()
    except KeyboardInterrupt:  # pragma: no cover
        service.close()
    return 0


def _cmd_dump_preds(args) -> int:
    model = load_checkpoint(args.model)
    manifest = load_manifest(args.manifest)
    dump_predictions(model, manifest, args.mode, args.out)
    print(json.dumps({"dump": str(args.out), "videos": len(manifest)}))
    return 0


def _cmd_adapt(args) -> int:
    cfg = _build_adapt_config(args)
    manifest = load_manifest(args.target)
    model, report = adapt(manifest, args.teacher, cfg)
    if args.eval_manifest is not None:
        result = evaluate(model, load_manifest(args.eval_manifest),
                          weighted=cfg.clip_weights)
        report.final_accuracy = result.accuracy
        report.per_class_accuracy = result.per_class
    if args.out:
        save_checkpoint(model, args.out)
    if args.bank_out:
        save_bank(report.teacher_bank, args.bank_out)
    if args.metrics:
        write_metrics(report, args.metrics)
    summary = {"epochs": cfg.epochs, "mask_draws": report.mask_draws}
    if report.final_accuracy is not None:
        summary["accuracy"] = report.final_accuracy
    print(json.dumps(summary))
    return 0


def _cmd_eval(args) -> int:
    model = load_checkpoint(args.model)
    manifest = load_manifest(args.manifest)
    weighted = args.clip_weights if args.clip_weights is not None else True
    result = evaluate(model, manifest, weighted=weighted)
    print(json.dumps({"accuracy": result.accuracy,
                      "per_class": {str(k): v for k, v in result.per_class.items()},
                      "videos": result.num_videos}))
    return 0


def _cmd_ablate(args) -> int:
    cfg = _build_adapt_config(args)
    target = load_manifest(args.target)
    eval_manifest = load_manifest(args.eval_manifest or args.target)
    rows = run_ablation_suite(target, args.teacher, cfg, eval_manifest,
                              seeds=range(args.seeds))
    with open(args.out, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    print(json.dumps({"rows": len(rows), "table": str(args.out)}))
    return 0


def _cmd_sweep(args) -> int:
    cfg = _build_adapt_config(args)
    target = load_manifest(args.target)
    eval_manifest = load_manifest(args.eval_manifest or args.target)
    beta_grid = [float(x) for x in args.beta_grid.split(",")]
    alpha_grid = [float(x) for x in args.alpha_grid.split(",")]
    rows = sweep(target, args.teacher, cfg, eval_manifest, beta_grid, alpha_grid)
    with open(args.out, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    accs = [r["accuracy"] for r in rows]
    print(json.dumps({"rows": len(rows), "min_accuracy": min(accs),
                      "max_accuracy": max(accs), "table": str(args.out)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blackvid",
                                     description="Black-box video domain adaptation at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic cross-domain benchmark")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--videos-per-class", type=int, default=60, dest="videos_per_class")
    p.add_argument("--rotation", type=float, default=0.5)
    p.add_argument("--translation", type=float, default=1.0)
    p.add_argument("--source-noise", type=float, default=0.25, dest="source_noise")
    p.add_argument("--target-noise", type=float, default=0.25, dest="target_noise")
    p.add_argument("--temporal-dependence", type=float, default=0.5, dest="temporal_dependence")
    p.add_argument("--partial", type=str, default=None,
                   help="comma-separated target class subset, e.g. 0,1,2")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train-source", help="train the source model on labeled source data")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=32, dest="batch_size")
    p.add_argument("--learning-rate", type=float, default=0.05, dest="learning_rate")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_train_source)

    p = sub.add_parser("serve", help="serve a checkpoint as a black-box prediction API")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8707)
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("dump-preds", help="dump black-box predictions for a manifest")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--mode", choices=("soft", "hard"), default="soft")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=_cmd_dump_preds)

    p = sub.add_parser("adapt", help="adapt a fresh target model against black-box predictions")
    p.add_argument("--target", type=Path, required=True, help="target manifest")
    p.add_argument("--teacher", required=True, help="prediction dump path or endpoint URL")
    p.add_argument("--out", type=Path, help="checkpoint output")
    p.add_argument("--metrics", type=Path, help="metrics JSONL output")
    p.add_argument("--bank-out", type=Path, dest="bank_out", help="teacher bank snapshot output")
    p.add_argument("--eval-manifest", type=Path, dest="eval_manifest",
                   help="labeled manifest for final scoring")
    _add_adapt_flags(p)
    p.set_defaults(func=_cmd_adapt)

    p = sub.add_parser("eval", help="score a checkpoint on a labeled manifest")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--no-clip-weights", action="store_false", default=None, dest="clip_weights")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="run the loss/clip-weight ablation table")
    p.add_argument("--target", type=Path, required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--eval-manifest", type=Path, dest="eval_manifest")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--out", type=Path, required=True)
    _add_adapt_flags(p)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("sweep", help="grid over beta_reg and alpha_v")
    p.add_argument("--target", type=Path, required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--eval-manifest", type=Path, dest="eval_manifest")
    p.add_argument("--beta-grid", default="0.2,0.6,1.0,1.2", dest="beta_grid")
    p.add_argument("--alpha-grid", default="0.1,0.3,0.5,0.9", dest="alpha_grid")
    p.add_argument("--out", type=Path, required=True)
    _add_adapt_flags(p)
    p.set_defaults(func=_cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BlackvidError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
