"""Experimental protocol: splits, label sweeps, metrics, grids, reports.

Splitting happens at the run level because neighboring segments overlap
by construction; letting one run straddle train and test would leak
samples across the boundary and inflate test accuracy.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from statistics import median
from typing import Mapping, Sequence

import numpy as np

from .datamodel import (
    CurvePoint,
    DomainTag,
    EncoderKind,
    EvalReport,
    EvalRow,
    Framework,
    ModalitySpec,
    Segment,
    Stage,
    TrainConfig,
)
from .encoders import EncoderConfig
from .errors import (
    ClassUnsplittable,
    EmptyCollection,
    EmptySubset,
    LengthMismatch,
    MissingDomain,
    RatioOutOfRange,
    TooSmall,
)
from .seeding import derive_seed, make_rng
from .training import (
    TrainResult,
    finetune_linear,
    finetune_supervised_baseline,
    predict,
    pretrain,
    train_supervised,
)

PARTS = ("train", "val", "test")


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float] = (8.0, 1.0, 1.0)
    seed: int = 0
    stratified: bool = True

    def __post_init__(self) -> None:
        if len(self.ratios) != 3 or any(r <= 0 for r in self.ratios):
            raise ValueError("three positive split ratios required")

    def weights(self) -> tuple[float, ...]:
        total = sum(self.ratios)
        return tuple(r / total for r in self.ratios)


def _apportion(total: int, weights: Sequence[float]) -> list[int]:
    """Largest-remainder rounding of total × weights to integers."""
    quotas = [total * w for w in weights]
    counts = [int(math.floor(q)) for q in quotas]
    order = sorted(
        range(len(weights)), key=lambda i: (-(quotas[i] - counts[i]), i)
    )
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def _run_groups(dataset: Sequence[Segment], stratified: bool):
    """Group run ids by class key (single group when unstratified)."""
    run_label: dict[str, object] = {}
    for seg in dataset:
        if seg.run_id in run_label and run_label[seg.run_id] != seg.label:
            raise ClassUnsplittable(
                f"run {seg.run_id} mixes labels; cannot stratify by run"
            )
        run_label[seg.run_id] = seg.label
    groups: dict[object, list[str]] = defaultdict(list)
    for run_id in sorted(run_label):
        key = run_label[run_id] if stratified else 0
        if stratified and key is None:
            raise ClassUnsplittable(f"run {run_id} is unlabeled; cannot stratify")
        groups[key].append(run_id)
    return groups


def split_dataset(
    dataset: Sequence[Segment], spec: SplitSpec
) -> tuple[list[Segment], list[Segment], list[Segment]]:
    """Partition into (train, val, test) over whole runs.

    Per-class quotas use largest-remainder rounding, then a greedy pass
    settles leftovers against the global part targets so the overall
    sizes match the requested ratios exactly (in runs).
    """
    if len(dataset) < 10:
        raise TooSmall(f"{len(dataset)} segments is too few to split")
    weights = spec.weights()
    groups = _run_groups(dataset, spec.stratified)
    total_runs = sum(len(v) for v in groups.values())
    targets = _apportion(total_runs, weights)

    keys = sorted(groups, key=repr)
    quotas = {k: [int(math.floor(len(groups[k]) * w)) for w in weights] for k in keys}
    leftovers = {k: len(groups[k]) - sum(quotas[k]) for k in keys}
    deficits = [targets[p] - sum(quotas[k][p] for k in keys) for p in range(3)]

    by_repr = {repr(k): k for k in keys}
    candidates = []
    for k in keys:
        for p in range(3):
            frac = len(groups[k]) * weights[p] - quotas[k][p]
            candidates.append((-frac, repr(k), p))
    candidates.sort()
    while any(deficits):
        progressed = False
        for _, key_repr, p in candidates:
            k = by_repr[key_repr]
            if leftovers[k] > 0 and deficits[p] > 0:
                quotas[k][p] += 1
                leftovers[k] -= 1
                deficits[p] -= 1
                progressed = True
        if not progressed:
            raise ClassUnsplittable("cannot reconcile per-class and global quotas")

    assignment: dict[str, int] = {}
    for k in keys:
        runs = list(groups[k])
        perm = make_rng(spec.seed, "split", repr(k)).permutation(len(runs))
        shuffled = [runs[i] for i in perm]
        if spec.stratified and quotas[k][0] == 0:
            raise ClassUnsplittable(
                f"class {k!r} has too few runs to appear in the train split"
            )
        cursor = 0
        for p in range(3):
            for run_id in shuffled[cursor : cursor + quotas[k][p]]:
                assignment[run_id] = p
            cursor += quotas[k][p]

    parts: tuple[list[Segment], ...] = ([], [], [])
    for seg in dataset:
        parts[assignment[seg.run_id]].append(seg)
    return parts


def subsample_labels(
    train: Sequence[Segment], ratio: float, seed: int
) -> list[Segment]:
    """Per-class proportional subset, nested across ratios for one seed.

    Each class keeps max(1, round(ratio × class size)) segments, taken as
    a prefix of one seed-derived per-class shuffle, so a smaller ratio
    always yields a subset of a larger one.
    """
    if not 0 < ratio <= 1:
        raise RatioOutOfRange(f"ratio {ratio} outside (0, 1]")
    if not train:
        raise EmptySubset("empty train split")
    by_class: dict[object, list[int]] = defaultdict(list)
    for i, seg in enumerate(train):
        if seg.label is None:
            raise ClassUnsplittable("cannot subsample unlabeled segments")
        by_class[seg.label].append(i)

    chosen: list[int] = []
    for label in sorted(by_class):
        idx = by_class[label]
        perm = make_rng(seed, "subsample", repr(label)).permutation(len(idx))
        keep = max(1, int(math.floor(ratio * len(idx) + 0.5)))
        chosen.extend(idx[i] for i in perm[:keep])
    return [train[i] for i in sorted(chosen)]


def metrics(
    predictions: Sequence[int], truth: Sequence[int], num_classes: int
) -> dict[str, float]:
    """Accuracy and macro-averaged F1 (empty classes score 0)."""
    if len(predictions) != len(truth):
        raise LengthMismatch(f"{len(predictions)} predictions vs {len(truth)} labels")
    if len(truth) == 0:
        raise EmptyCollection("no samples to score")
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(truth, dtype=np.int64)
    accuracy = float((pred == true).mean())

    f1s = []
    for c in range(num_classes):
        tp = int(((pred == c) & (true == c)).sum())
        fp = int(((pred == c) & (true != c)).sum())
        fn = int(((pred != c) & (true == c)).sum())
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom > 0 else 0.0)
    return {"accuracy": accuracy, "macro_f1": float(np.mean(f1s))}


def record_convergence(
    run: TrainResult | Sequence, first_n_epochs: int
) -> list[CurvePoint]:
    """Per-epoch accuracy curve, truncated to the first N epochs."""
    trace = run.trace if isinstance(run, TrainResult) else run
    curve = []
    for rec in trace:
        if rec.epoch >= first_n_epochs:
            break
        if rec.train_acc is None:
            continue
        val = rec.val_acc if rec.val_acc is not None else rec.train_acc
        curve.append(CurvePoint(rec.epoch, rec.train_acc, val))
    return curve


def epochs_to_fraction(curve: Sequence[CurvePoint], fraction: float) -> int:
    """First epoch whose train accuracy reaches fraction × final value."""
    if not curve:
        raise EmptyCollection("empty convergence curve")
    final = curve[-1].train_accuracy
    target = fraction * final
    for point in curve:
        if point.train_accuracy >= target:
            return point.epoch
    return curve[-1].epoch


@dataclass(frozen=True)
class StageConfigs:
    """Per-stage training configs used by grid runs (seed is overridden
    per grid cell)."""

    pretrain: TrainConfig
    supervised: TrainConfig
    finetune: TrainConfig
    supervised_finetune: TrainConfig

    @staticmethod
    def defaults(**scales) -> "StageConfigs":
        return StageConfigs(
            pretrain=TrainConfig.stage_defaults(Stage.PRETRAIN, **scales),
            supervised=TrainConfig.stage_defaults(Stage.SUPERVISED, **scales),
            finetune=TrainConfig.stage_defaults(Stage.FINETUNE, **scales),
            supervised_finetune=TrainConfig.stage_defaults(
                Stage.SUPERVISED_FINETUNE, **scales
            ),
        )


@dataclass(frozen=True)
class GridSpec:
    frameworks: tuple[Framework, ...] = (
        Framework.SUPERVISED,
        Framework.SUPERVISED_FINETUNE,
        Framework.FOCAL,
    )
    encoders: tuple[EncoderKind, ...] = (EncoderKind.DEEPSENSE, EncoderKind.SWIN)
    ratios: tuple[float, ...] = (1.0, 0.5, 0.1, 0.01)
    train_domain: DomainTag = DomainTag.SYNTH_A
    test_domains: tuple[DomainTag, ...] = (DomainTag.SYNTH_A, DomainTag.SYNTH_B)
    seeds: tuple[int, ...] = (0, 1, 2)
    split: SplitSpec = field(default_factory=SplitSpec)
    num_classes: int = 4
    convergence_epochs: int = 100


def cell_id(encoder: str, framework: str, ratio: float, seed: int) -> str:
    pct = ratio * 100
    pct_text = f"{pct:.4g}".replace(".", "p")
    return f"{encoder.lower()}_{framework.lower()}_{pct_text}pct_seed{seed}"


def _grid_unit(args) -> tuple[list[EvalRow], dict[str, list[CurvePoint]]]:
    """All cells for one (encoder, seed) pair.

    Self-supervised pre-training and the full-label supervised baseline
    are shared across ratios within the pair since they do not depend on
    the label subset.
    """
    (grid, enc, seed, encoder_cfg, stage_cfgs, mods, train_split, val_split, test_splits) = args
    enc_cfg = replace(encoder_cfg, kind=enc, param_seed=seed)
    focal_base = None
    if Framework.FOCAL in grid.frameworks:
        focal_base = pretrain(
            train_split, replace(stage_cfgs.pretrain, seed=seed), enc_cfg, mods
        )
    sup_base = None
    if Framework.SUPERVISED_FINETUNE in grid.frameworks:
        sup_base = train_supervised(
            train_split,
            replace(stage_cfgs.supervised, seed=seed),
            enc_cfg,
            mods,
            num_classes=grid.num_classes,
            val_segments=val_split,
        )
    rows: list[EvalRow] = []
    curves: dict[str, list[CurvePoint]] = {}
    subsample_seed = derive_seed(grid.split.seed, "subsample", seed)
    for ratio in grid.ratios:
        subset = subsample_labels(train_split, ratio, subsample_seed)
        for fw in grid.frameworks:
            if fw is Framework.SUPERVISED:
                result = train_supervised(
                    subset,
                    replace(stage_cfgs.supervised, seed=seed),
                    enc_cfg,
                    mods,
                    num_classes=grid.num_classes,
                    val_segments=val_split,
                )
            elif fw is Framework.FOCAL:
                result = finetune_linear(
                    focal_base.checkpoint,
                    subset,
                    replace(stage_cfgs.finetune, seed=seed),
                    mods,
                    num_classes=grid.num_classes,
                    val_segments=val_split,
                )
            else:
                result = finetune_supervised_baseline(
                    sup_base.checkpoint,
                    subset,
                    replace(stage_cfgs.supervised_finetune, seed=seed),
                    mods,
                    num_classes=grid.num_classes,
                    val_segments=val_split,
                )
            cid = cell_id(enc.value, fw.value, ratio, seed)
            curves[cid] = record_convergence(result, grid.convergence_epochs)
            for dom in grid.test_domains:
                preds = predict(result.model, test_splits[dom], mods, result.stats)
                truth = [s.label for s in test_splits[dom]]
                scores = metrics(preds, truth, grid.num_classes)
                rows.append(
                    EvalRow(
                        encoder=enc.value,
                        framework=fw.value,
                        label_ratio=ratio,
                        train_domain=grid.train_domain.value,
                        test_domain=dom.value,
                        seed=seed,
                        accuracy=scores["accuracy"],
                        macro_f1=scores["macro_f1"],
                    )
                )
    return rows, curves


def run_grid(
    grid: GridSpec,
    datasets: Mapping[DomainTag, Sequence[Segment]],
    mods: Mapping[str, ModalitySpec],
    encoder_cfg: EncoderConfig,
    stage_cfgs: StageConfigs,
    *,
    jobs: int = 1,
) -> EvalReport:
    """Train every (framework, encoder, ratio, seed) cell and score it on
    each test domain's held-out split.

    One trained model per cell serves all test domains.  With jobs > 1,
    (encoder, seed) units run in separate processes; every unit draws
    from its own derived seed streams, so results are identical to a
    sequential run.
    """
    needed = {grid.train_domain, *grid.test_domains}
    for dom in needed:
        if dom not in datasets:
            raise MissingDomain(f"no dataset for {dom}")

    splits = {dom: split_dataset(datasets[dom], grid.split) for dom in needed}
    train_split, val_split, _ = splits[grid.train_domain]
    test_splits = {dom: splits[dom][2] for dom in grid.test_domains}

    units = [
        (grid, enc, seed, encoder_cfg, stage_cfgs, dict(mods), train_split, val_split, test_splits)
        for enc in grid.encoders
        for seed in grid.seeds
    ]
    if jobs > 1 and len(units) > 1:
        from multiprocessing import get_context

        with get_context("fork").Pool(min(jobs, len(units))) as pool:
            outputs = pool.map(_grid_unit, units)
    else:
        outputs = [_grid_unit(u) for u in units]

    report = EvalReport()
    for rows, curves in outputs:
        report.rows.extend(rows)
        report.curves.update(curves)
    return report


GRID_COLUMNS = (
    "encoder",
    "framework",
    "label_ratio",
    "train_domain",
    "test_domain",
    "seed",
    "accuracy",
    "macro_f1",
)


def _format_pct(ratio: float) -> str:
    return f"{ratio * 100:.4g}%"


def emit_report(report: EvalReport, out_dir: str | Path) -> dict[str, Path]:
    """Write grid.csv, grid.md, and per-cell convergence CSV/PNG files."""
    if not report.rows:
        raise EmptyCollection("report has no rows")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}

    grid_csv = out / "grid.csv"
    with open(grid_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(GRID_COLUMNS)
        for row in report.sorted_rows():
            writer.writerow(
                [
                    row.encoder,
                    row.framework,
                    repr(row.label_ratio),
                    row.train_domain,
                    row.test_domain,
                    row.seed,
                    repr(row.accuracy),
                    repr(row.macro_f1),
                ]
            )
    paths["grid.csv"] = grid_csv

    paths["grid.md"] = _emit_markdown(report, out / "grid.md")

    conv_dir = out / "convergence"
    if report.curves:
        conv_dir.mkdir(exist_ok=True)
    for cid in sorted(report.curves):
        curve = report.curves[cid]
        curve_csv = conv_dir / f"{cid}.csv"
        with open(curve_csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_accuracy", "eval_accuracy"])
            for p in curve:
                writer.writerow([p.epoch, repr(p.train_accuracy), repr(p.eval_accuracy)])
        paths[f"convergence/{cid}.csv"] = curve_csv
        paths[f"convergence/{cid}.png"] = _plot_curve(curve, cid, conv_dir / f"{cid}.png")
    return paths


def _plot_curve(curve: Sequence[CurvePoint], title: str, path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.2))
    epochs = [p.epoch for p in curve]
    ax.plot(epochs, [p.train_accuracy for p in curve], label="train")
    ax.plot(epochs, [p.eval_accuracy for p in curve], label="eval")
    ax.set_xlabel("epoch")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.05)
    ax.set_title(title, fontsize=8)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def _emit_markdown(report: EvalReport, path: Path) -> Path:
    """Median-over-seeds table per test domain, ratios in descending order.

    The best accuracy per ratio column is flagged in a separate marker
    column instead of styled text so the table stays easy to parse.
    """
    ratios = sorted({r.label_ratio for r in report.rows}, reverse=True)
    domains = sorted({r.test_domain for r in report.rows})
    models = sorted({(r.encoder, r.framework) for r in report.rows})

    by_key: dict[tuple, list[EvalRow]] = defaultdict(list)
    for row in report.rows:
        by_key[(row.encoder, row.framework, row.label_ratio, row.test_domain)].append(row)

    lines = ["# Robustness grid", ""]
    for dom in domains:
        lines.append(f"## Test domain: {dom}")
        lines.append("")
        header = ["encoder", "framework"]
        for ratio in ratios:
            header += [f"acc@{_format_pct(ratio)}", f"f1@{_format_pct(ratio)}"]
        header.append("best_at")
        lines.append("| " + " | ".join(header) + " |")
        lines.append("|" + "---|" * len(header))

        cell_acc: dict[tuple, float] = {}
        for enc, fw in models:
            for ratio in ratios:
                rows = by_key.get((enc, fw, ratio, dom), [])
                if rows:
                    cell_acc[(enc, fw, ratio)] = median(r.accuracy for r in rows)
        best_per_ratio = {
            ratio: max(
                (acc for (e, f, rr), acc in cell_acc.items() if rr == ratio),
                default=None,
            )
            for ratio in ratios
        }
        for enc, fw in models:
            cells = [enc, fw]
            best_at = []
            for ratio in ratios:
                rows = by_key.get((enc, fw, ratio, dom), [])
                if not rows:
                    cells += ["-", "-"]
                    continue
                acc = median(r.accuracy for r in rows)
                f1 = median(r.macro_f1 for r in rows)
                cells += [f"{acc:.4f}", f"{f1:.4f}"]
                if best_per_ratio[ratio] is not None and acc == best_per_ratio[ratio]:
                    best_at.append(_format_pct(ratio))
            cells.append(", ".join(best_at) if best_at else "-")
            lines.append("| " + " | ".join(cells) + " |")
        lines.append("")
    path.write_text("\n".join(lines))
    return path


def load_report(out_dir: str | Path) -> EvalReport:
    """Parse grid.csv and convergence CSVs back into an EvalReport."""
    out = Path(out_dir)
    report = EvalReport()
    with open(out / "grid.csv", newline="") as fh:
        for rec in csv.DictReader(fh):
            report.rows.append(
                EvalRow(
                    encoder=rec["encoder"],
                    framework=rec["framework"],
                    label_ratio=float(rec["label_ratio"]),
                    train_domain=rec["train_domain"],
                    test_domain=rec["test_domain"],
                    seed=int(rec["seed"]),
                    accuracy=float(rec["accuracy"]),
                    macro_f1=float(rec["macro_f1"]),
                )
            )
    conv = out / "convergence"
    if conv.is_dir():
        for curve_csv in sorted(conv.glob("*.csv")):
            points = []
            with open(curve_csv, newline="") as fh:
                for rec in csv.DictReader(fh):
                    points.append(
                        CurvePoint(
                            int(rec["epoch"]),
                            float(rec["train_accuracy"]),
                            float(rec["eval_accuracy"]),
                        )
                    )
            report.curves[curve_csv.stem] = points
    return report
