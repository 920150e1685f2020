"""Command-line entry point.

Every subcommand takes ``--config <file>`` (TOML, or JSON by extension)
plus optional ``--set dotted.key=value`` overrides, runs one pipeline
stage, writes its artifacts under the configured output directory, and
records a ``manifest.json`` with the config hash, seed, library
versions, and produced files.  The environment variable ``VIBEFM_OUT``
overrides the output root without entering the config hash.

Exit codes: 0 success, 2 bad arguments, 3 invalid config, 4 runtime
failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

from .checkpoint import Checkpoint
from .datamodel import DomainTag, Stage
from .dataio import read_dataset, write_dataset
from .errors import ConfigError, VibefmError
from .evaluation import (
    emit_report,
    load_report,
    metrics,
    run_grid,
    split_dataset,
    subsample_labels,
)
from .expconfig import (
    ExperimentConfig,
    dump_toml,
    load_experiment,
    synth_spec_to_dict,
    write_manifest,
)
from .seeding import derive_seed
from .synthgen import generate_dataset, separability_probe
from .training import (
    finetune_linear,
    finetune_supervised_baseline,
    load_model,
    predict,
    pretrain,
    train_supervised,
    write_metrics_csv,
)

SYNTH_DOMAINS = (DomainTag.SYNTH_A, DomainTag.SYNTH_B)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vibefm",
        description="Multimodal vibration sensing: synthesis, pre-training, "
        "fine-tuning, and robustness grids.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> argparse.ArgumentParser:
        p.add_argument("--config", required=True, help="TOML or JSON experiment config")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config value, e.g. --set train.pretrain.epochs=10",
        )
        p.add_argument("--jobs", type=int, default=1, help="max parallel workers")
        return p

    common(sub.add_parser("synth", help="generate and write synthetic datasets"))
    common(sub.add_parser("pretrain", help="self-supervised pre-training"))
    common(sub.add_parser("train", help="supervised training on the train split"))
    ft = common(sub.add_parser("finetune", help="fine-tune from a checkpoint"))
    ft.add_argument("--checkpoint", required=True)
    ft.add_argument("--ratio", type=float, default=1.0, help="label ratio in (0, 1]")
    ev = common(sub.add_parser("evaluate", help="score a checkpoint on test splits"))
    ev.add_argument("--checkpoint", required=True)
    common(sub.add_parser("grid", help="run the full robustness grid"))
    common(sub.add_parser("report", help="re-emit tables and plots from grid.csv"))
    return parser


def _out_root(cfg: ExperimentConfig) -> Path:
    env = os.environ.get("VIBEFM_OUT")
    return Path(env) if env else Path(cfg.out_dir)


def _load_domain(cfg: ExperimentConfig, domain: DomainTag, out: Path, jobs: int):
    """Dataset for one domain: explicit path, prior synth output, or fresh."""
    if domain in cfg.data_paths:
        return read_dataset(cfg.data_paths[domain], cfg.mods)
    on_disk = out / "data" / domain.value.lower()
    if on_disk.is_dir():
        return read_dataset(on_disk, cfg.mods)
    return generate_dataset(cfg.synth, domain, cfg.mods, jobs=jobs)


def _splits(cfg: ExperimentConfig, out: Path, jobs: int):
    dataset = _load_domain(cfg, cfg.grid.train_domain, out, jobs)
    return split_dataset(dataset, cfg.split)


def _save_result(result, out: Path, stem: str) -> list[Path]:
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    metrics_dir = out / "metrics"
    metrics_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = ckpt_dir / f"{stem}.ckpt"
    result.checkpoint.save(ckpt_path)
    csv_path = write_metrics_csv(result.trace, metrics_dir / f"{stem}.csv")
    return [ckpt_path, csv_path]


def cmd_synth(args, cfg: ExperimentConfig, out: Path) -> int:
    data_dir = out / "data"
    produced: list[Path] = []
    for domain in SYNTH_DOMAINS:
        segments = generate_dataset(cfg.synth, domain, cfg.mods, jobs=args.jobs)
        root = write_dataset(segments, data_dir / domain.value.lower())
        produced.append(root)
        if domain is DomainTag.SYNTH_A:
            probe = separability_probe(segments, cfg.mods)
            print(f"{domain.value}: {len(segments)} segments, separability {probe:.4f}")
        else:
            print(f"{domain.value}: {len(segments)} segments")
    spec_path = data_dir / "synth_spec.toml"
    spec_path.write_text(dump_toml(synth_spec_to_dict(cfg.synth)))
    produced.append(spec_path)
    produced.append(write_manifest(out, command="synth", cfg=cfg, produced=produced))
    return 0


def cmd_pretrain(args, cfg: ExperimentConfig, out: Path) -> int:
    train, _, _ = _splits(cfg, out, args.jobs)
    enc_cfg = replace(cfg.encoder, param_seed=cfg.seed)
    config = replace(cfg.stages.pretrain, seed=cfg.seed)
    result = pretrain(train, config, enc_cfg, cfg.mods)
    stem = f"pretrain_{enc_cfg.kind.value.lower()}_s{cfg.seed}"
    produced = _save_result(result, out, stem)
    produced.append(write_manifest(out, command="pretrain", cfg=cfg, produced=produced))
    last = result.trace[-1]
    print(
        f"pretrained {enc_cfg.kind.value} for {len(result.trace)} epochs, "
        f"final loss {last.train_loss:.4f}, orthogonality {last.orth:.6f}"
    )
    return 0


def cmd_train(args, cfg: ExperimentConfig, out: Path) -> int:
    train, val, _ = _splits(cfg, out, args.jobs)
    enc_cfg = replace(cfg.encoder, param_seed=cfg.seed)
    config = replace(cfg.stages.supervised, seed=cfg.seed)
    result = train_supervised(
        train, config, enc_cfg, cfg.mods, num_classes=cfg.num_classes, val_segments=val
    )
    stem = f"supervised_{enc_cfg.kind.value.lower()}_s{cfg.seed}"
    produced = _save_result(result, out, stem)
    produced.append(write_manifest(out, command="train", cfg=cfg, produced=produced))
    best = result.trace[result.best_epoch]
    print(
        f"trained {enc_cfg.kind.value} for {len(result.trace)} epochs, "
        f"best val accuracy {best.val_acc:.4f} at epoch {result.best_epoch}"
    )
    return 0


def cmd_finetune(args, cfg: ExperimentConfig, out: Path) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    train, val, _ = _splits(cfg, out, args.jobs)
    subset = subsample_labels(train, args.ratio, derive_seed(cfg.split.seed, "subsample", cfg.seed))
    if ckpt.stage is Stage.PRETRAIN:
        config = replace(cfg.stages.finetune, seed=cfg.seed)
        result = finetune_linear(
            ckpt, subset, config, cfg.mods, num_classes=cfg.num_classes, val_segments=val
        )
        kind = "probe"
    else:
        config = replace(cfg.stages.supervised_finetune, seed=cfg.seed)
        result = finetune_supervised_baseline(
            ckpt, subset, config, cfg.mods, num_classes=cfg.num_classes, val_segments=val
        )
        kind = "headretrain"
    pct = f"{args.ratio * 100:.4g}".replace(".", "p")
    stem = f"finetune_{kind}_{pct}pct_s{cfg.seed}"
    produced = _save_result(result, out, stem)
    produced.append(write_manifest(out, command="finetune", cfg=cfg, produced=produced))
    last = result.trace[-1]
    print(
        f"fine-tuned on {len(subset)} labeled segments ({args.ratio:.0%}), "
        f"final val accuracy {last.val_acc:.4f}"
    )
    return 0


def cmd_evaluate(args, cfg: ExperimentConfig, out: Path) -> int:
    import json

    ckpt = Checkpoint.load(args.checkpoint)
    model, stats = load_model(ckpt, cfg.mods)
    scores = {}
    for domain in cfg.grid.test_domains:
        dataset = _load_domain(cfg, domain, out, args.jobs)
        _, _, test = split_dataset(dataset, cfg.split)
        preds = predict(model, test, cfg.mods, stats)
        truth = [s.label for s in test]
        scores[domain.value] = metrics(preds, truth, cfg.num_classes)
        print(
            f"{domain.value}: accuracy {scores[domain.value]['accuracy']:.4f}, "
            f"macro_f1 {scores[domain.value]['macro_f1']:.4f}"
        )
    out.mkdir(parents=True, exist_ok=True)
    path = out / "evaluation.json"
    with open(path, "w") as fh:
        json.dump(scores, fh, indent=1, sort_keys=True)
    write_manifest(out, command="evaluate", cfg=cfg, produced=[path])
    return 0


def cmd_grid(args, cfg: ExperimentConfig, out: Path) -> int:
    needed = {cfg.grid.train_domain, *cfg.grid.test_domains}
    datasets = {dom: _load_domain(cfg, dom, out, args.jobs) for dom in sorted(needed, key=lambda d: d.value)}
    report = run_grid(cfg.grid, datasets, cfg.mods, cfg.encoder, cfg.stages, jobs=args.jobs)
    report_dir = out / "reports" / cfg.name
    paths = emit_report(report, report_dir)
    produced = list(paths.values())
    produced.append(write_manifest(out, command="grid", cfg=cfg, produced=produced))
    print(f"grid complete: {len(report.rows)} rows -> {report_dir / 'grid.csv'}")
    return 0


def cmd_report(args, cfg: ExperimentConfig, out: Path) -> int:
    report_dir = out / "reports" / cfg.name
    report = load_report(report_dir)
    paths = emit_report(report, report_dir)
    produced = list(paths.values())
    produced.append(write_manifest(out, command="report", cfg=cfg, produced=produced))
    print(f"re-emitted {len(paths)} report files under {report_dir}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "grid": cmd_grid,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    import torch

    torch.set_num_threads(1)
    try:
        cfg = load_experiment(args.config, args.set)
        return COMMANDS[args.command](args, cfg, _out_root(cfg))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 3
    except VibefmError as exc:
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        return 4
    except (KeyboardInterrupt, SystemExit):
        raise
    except Exception as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
