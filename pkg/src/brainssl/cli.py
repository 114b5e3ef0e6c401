"""Operator surface: synth / pretrain / eval / report subcommands.

Exit codes: 0 success, 1 runtime failure, 2 validation failure. Flags
select modes and paths; everything affecting science comes from the
config file. Outputs are deterministic given identical arguments and
seeds, except wall-clock timings, which go to a separate log file.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, apply_thread_env, parse_fractions
from .evaluation import (
    EvalReport,
    aggregate_runs,
    finetune,
    get_task,
    linear_probe,
    load_reports,
    plot_sweep,
    render_report_table,
    run_fraction_sweep,
    save_reports,
    train_supervised,
    write_sweep_csv,
)
from .manifest import load_manifest
from .synth import generate_dataset
from .training import pretrain_mae, pretrain_simclr


def _parse_dims(text: str) -> tuple[int, int, int]:
    parts = [int(x) for x in text.split(",")]
    if len(parts) == 1:
        return (parts[0],) * 3
    if len(parts) == 3:
        return tuple(parts)
    raise ConfigError(f"--dims expects one or three integers, got {text!r}")


def cmd_synth(args) -> int:
    dims = _parse_dims(args.dims)
    ratios = tuple(float(x) for x in args.split.split(","))
    if len(ratios) != 3:
        raise ConfigError(f"--split expects three ratios, got {args.split!r}")
    manifest = generate_dataset(
        n_patients=args.patients,
        scans_per_patient_range=(args.scans_min, args.scans_max),
        dims=dims,
        seed=args.seed,
        out_dir=args.out,
        split_ratios=ratios,
    )
    manifest_path = Path(args.out) / "manifest.jsonl"
    print(manifest_path)
    print(f"patients={len(manifest.patients)} scans={sum(len(p.scans) for p in manifest.patients)}")
    return 0


def cmd_pretrain(args) -> int:
    config = RunConfig.from_file(args.config)
    manifest = load_manifest(config.manifest_path())
    train_cfg = config.train_config()
    if train_cfg.objective != args.objective:
        raise ConfigError(
            f"--objective {args.objective} does not match train.objective {train_cfg.objective}"
        )
    out_dir = config.output_root() / f"pretrain-{args.objective}-seed{train_cfg.seed}"
    if args.objective == "simclr":
        encoder_cfg = config.encoder_config()
        spec = config.augment_spec(encoder_cfg.input_shape)
        last = pretrain_simclr(train_cfg, encoder_cfg, manifest, out_dir, augment_spec=spec)
    else:
        vit_cfg = config.vit_config()
        spec = config.augment_spec(vit_cfg.input_shape)
        last = pretrain_mae(train_cfg, vit_cfg, manifest, out_dir, augment_spec=spec)
    print(last)
    return 0


def _checkpoints_for_seeds(checkpoints, seeds):
    if not checkpoints:
        raise ConfigError("--checkpoint is required for lp/ft modes")
    if len(checkpoints) == 1:
        return [checkpoints[0]] * len(seeds)
    if len(checkpoints) == len(seeds):
        return list(checkpoints)
    raise ConfigError(
        f"got {len(checkpoints)} checkpoints for {len(seeds)} seeds; pass one, or one per seed"
    )


def cmd_eval(args) -> int:
    config = RunConfig.from_file(args.config)
    manifest = load_manifest(config.manifest_path())
    task = get_task(args.task if args.task else config.eval_task_name())
    cfg = config.eval_run_config()
    seeds = config.eval_seeds()
    config_hash = config.config_hash()
    out_dir = config.output_root() / f"eval-{task.name}-{args.mode}"
    out_dir.mkdir(parents=True, exist_ok=True)

    reports: list[EvalReport] = []
    if args.mode == "supervised":
        model_kind = config.model_kind()
        model_cfg = config.encoder_config() if model_kind == "resnet18_3d" else config.vit_config()
        for seed in seeds:
            reports.append(
                train_supervised(
                    model_cfg, task, cfg, manifest, seed=seed,
                    epochs=config.supervised_epochs(), config_hash=config_hash,
                )
            )
    else:
        paths = _checkpoints_for_seeds(args.checkpoint, seeds)
        run = linear_probe if args.mode == "lp" else finetune
        for seed, path in zip(seeds, paths):
            reports.append(run(path, task, cfg, manifest, seed=seed, config_hash=config_hash))

    save_reports(reports, out_dir / "reports.jsonl")
    save_reports(reports, out_dir / "eval_log.jsonl", include_runtime=True)
    aggregate = aggregate_runs(reports)
    save_reports([aggregate], out_dir / "aggregate.jsonl")
    print(render_report_table([aggregate]))

    if args.fractions:
        if args.mode == "supervised":
            raise ConfigError("--fractions applies to lp/ft modes only")
        fractions = parse_fractions(args.fractions)
        rows = []
        for seed, path in zip(seeds, _checkpoints_for_seeds(args.checkpoint, seeds)):
            rows.extend(
                run_fraction_sweep(
                    path, [task], cfg, manifest, seed=seed, fractions=fractions,
                    mode=args.mode, config_hash=config_hash,
                )
            )
        write_sweep_csv(rows, out_dir / "sweep.csv")
        plot_sweep(rows, out_dir / "sweep.png")
        print(out_dir / "sweep.csv")
    return 0


def cmd_report(args) -> int:
    paths = []
    for raw in args.reports:
        p = Path(raw)
        if p.is_dir():
            paths.extend(sorted(p.rglob("reports.jsonl")))
        elif p.exists():
            paths.append(p)
    if not paths:
        raise FileNotFoundError(f"no report files found under {args.reports}")
    reports = []
    for p in paths:
        reports.extend(load_reports(p))
    if not reports:
        raise FileNotFoundError("report files contained no records")
    groups: dict[tuple, list[EvalReport]] = {}
    for r in reports:
        groups.setdefault((r.task, r.mode, r.model, r.metric), []).append(r)
    aggregated = [aggregate_runs(g, force=args.force) for g in groups.values()]
    print(render_report_table(aggregated))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="brainssl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--patients", type=int, required=True)
    p.add_argument("--dims", type=str, default="32", help="cube size or d,h,w")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--scans-min", type=int, default=1)
    p.add_argument("--scans-max", type=int, default=3)
    p.add_argument("--split", type=str, default="0.6,0.2,0.2")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="run self-supervised pre-training")
    p.add_argument("--objective", choices=("simclr", "mae"), required=True)
    p.add_argument("--config", type=str, required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("eval", help="downstream evaluation")
    p.add_argument("--mode", choices=("lp", "ft", "supervised"), required=True)
    p.add_argument("--task", type=str, default=None)
    p.add_argument("--config", type=str, required=True)
    p.add_argument("--checkpoint", action="append", default=[])
    p.add_argument("--fractions", type=str, default=None, help='"default" or comma-separated fractions')
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render aggregated result tables")
    p.add_argument("--reports", nargs="+", required=True)
    p.add_argument("--force", action="store_true", help="aggregate across differing config hashes")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    apply_thread_env()
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
