"""Training loops for the four stages.

``pretrain`` optimizes the self-supervised objective over two augmented
views per batch.  ``train_supervised`` fits an encoder plus fusion head
from scratch.  ``finetune_linear`` trains a linear probe on a frozen
pre-trained encoder, and ``finetune_supervised_baseline`` re-initializes
and retrains only the final layer of a frozen supervised model.

Every loop sets the learning rate per epoch from the closed-form cosine
schedule, derives all randomness from named sub-streams of the config
seed, and records one :class:`EpochRecord` per epoch.  A NaN loss aborts
the run and restores the last finite epoch snapshot.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from . import __version__
from .augment import AugmentParams, AugmentationPlan, apply_freq_plan, apply_time_plan, mixup, sample_plan
from .checkpoint import (
    Checkpoint,
    encoder_config_from_dict,
    encoder_config_to_dict,
    norm_stats_from_dict,
    train_config_to_dict,
)
from .datamodel import (
    HeadKind,
    ModalitySpec,
    OptimizerKind,
    Segment,
    Stage,
    TrainConfig,
    as_soft_label,
)
from .encoders import (
    EncoderConfig,
    MultimodalEncoder,
    SensingClassifier,
    build_classifier,
    build_encoder,
    reinit_final_layer,
    set_trainable,
)
from .errors import (
    CheckpointError,
    EmptyDataset,
    EpochOutOfRange,
    NonFinite,
    SingleClassDataset,
    StageMismatch,
)
from .objective import focal_loss
from .preprocess import (
    NormStats,
    compute_norm_stats,
    interval_stft,
    model_input,
    normalize,
)
from .seeding import derive_seed, make_rng

EVAL_BATCH = 256


def effective_epochs(config: TrainConfig) -> int:
    """Published epoch count scaled down for desk-scale runs, at least 1."""
    return max(1, int(round(config.epochs * config.epoch_scale)))


def cosine_lr(epoch: int, config: TrainConfig) -> float:
    """Closed-form cosine schedule from ``initial_lr`` down to
    ``initial_lr * lr_decay`` across the effective epochs."""
    total = effective_epochs(config)
    if not 0 <= epoch < total:
        raise EpochOutOfRange(f"epoch {epoch} outside [0, {total})")
    if total == 1:
        return config.initial_lr
    lr_min = config.initial_lr * config.lr_decay
    t = epoch / (total - 1)
    return lr_min + 0.5 * (config.initial_lr - lr_min) * (1.0 + math.cos(math.pi * t))


@dataclass(frozen=True)
class EpochRecord:
    """Per-epoch metrics; accuracy fields are running training-batch
    accuracy and clean validation accuracy (None where not applicable)."""

    epoch: int
    stage: str
    lr: float
    train_loss: float
    train_acc: float | None = None
    val_acc: float | None = None
    shared: float | None = None
    private: float | None = None
    orth: float | None = None


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    trace: list[EpochRecord]
    model: torch.nn.Module
    stats: NormStats
    diverged: bool = False
    applied_ops: frozenset = frozenset()
    best_epoch: int | None = None


METRIC_COLUMNS = (
    "epoch",
    "stage",
    "lr",
    "train_loss",
    "train_acc",
    "val_acc",
    "shared",
    "private",
    "orth",
)


def write_metrics_csv(trace: Sequence[EpochRecord], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for rec in trace:
            writer.writerow(
                [
                    rec.epoch,
                    rec.stage,
                    repr(rec.lr),
                    repr(rec.train_loss),
                    *("" if v is None else repr(v) for v in
                      (rec.train_acc, rec.val_acc, rec.shared, rec.private, rec.orth)),
                ]
            )
    return path


def _with_waveforms(seg: Segment, waveforms: dict[str, np.ndarray]) -> Segment:
    return Segment(
        waveforms=waveforms,
        label=seg.label,
        domain_tag=seg.domain_tag,
        run_id=seg.run_id,
        start_time_s=seg.start_time_s,
    )


def assemble_inputs(
    segments: Sequence[Segment],
    specs: Mapping[str, ModalitySpec],
    stats: NormStats,
    *,
    plans: Sequence[AugmentationPlan] | None = None,
    rngs: Sequence[np.random.Generator] | None = None,
    audit: list[str] | None = None,
) -> dict[str, torch.Tensor]:
    """Waveforms -> (plan time ops) -> spectra -> (plan freq ops) ->
    normalize -> stacked ``[B, 2C, I, F]`` tensors per modality."""
    stacked: dict[str, list[np.ndarray]] = {m: [] for m in sorted(segments[0].waveforms)}
    for i, seg in enumerate(segments):
        if plans is None:
            spectra = interval_stft(seg, specs)
        else:
            waves = apply_time_plan(plans[i], seg.waveforms, rngs[i], audit)
            spectra = interval_stft(_with_waveforms(seg, waves), specs)
            spectra = apply_freq_plan(plans[i], spectra, rngs[i], audit)
        for m in stacked:
            stacked[m].append(model_input(normalize(spectra[m], stats)))
    return {m: torch.from_numpy(np.stack(v)) for m, v in stacked.items()}


def dataset_norm_stats(
    segments: Sequence[Segment], specs: Mapping[str, ModalitySpec]
) -> NormStats:
    """Normalization statistics over a training collection's raw spectra."""
    if not segments:
        raise EmptyDataset("cannot compute statistics over an empty dataset")
    spectra = [sp for seg in segments for sp in interval_stft(seg, specs).values()]
    return compute_norm_stats(spectra)


def _optimizer(params, config: TrainConfig) -> torch.optim.Optimizer:
    params = [p for p in params if p.requires_grad]
    if OptimizerKind(config.optimizer) is OptimizerKind.ADAMW:
        return torch.optim.AdamW(params, lr=config.initial_lr)
    return torch.optim.Adam(params, lr=config.initial_lr)


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr


def _snapshot(model: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def _stage_plan(
    stage: Stage, seed: int, params: AugmentParams, allowed: tuple[str, ...]
) -> AugmentationPlan:
    plan = sample_plan(stage, seed, params)
    return AugmentationPlan(
        stage,
        tuple(op for op in plan.time_ops if op in allowed),
        tuple(op for op in plan.freq_ops if op in allowed),
        params,
    )


class _eval_mode:
    """Temporarily switch to eval mode, restoring per-module flags after
    (frozen encoders must stay in eval mode while heads train)."""

    def __init__(self, model: torch.nn.Module) -> None:
        self.model = model

    def __enter__(self) -> None:
        self.flags = [(m, m.training) for m in self.model.modules()]
        self.model.eval()

    def __exit__(self, *exc) -> None:
        for module, flag in self.flags:
            module.training = flag


def predict(
    model: SensingClassifier,
    segments: Sequence[Segment],
    specs: Mapping[str, ModalitySpec],
    stats: NormStats,
) -> np.ndarray:
    """Clean-input argmax predictions as an int64 vector."""
    if not segments:
        raise EmptyDataset("nothing to predict on")
    preds: list[np.ndarray] = []
    with _eval_mode(model), torch.no_grad():
        for start in range(0, len(segments), EVAL_BATCH):
            chunk = segments[start : start + EVAL_BATCH]
            logits = model(assemble_inputs(chunk, specs, stats))
            preds.append(logits.argmax(dim=1).numpy())
    return np.concatenate(preds)


def _clean_accuracy(
    model: SensingClassifier,
    inputs: dict[str, torch.Tensor],
    labels: np.ndarray,
) -> float:
    correct = 0
    with _eval_mode(model), torch.no_grad():
        n = len(labels)
        for start in range(0, n, EVAL_BATCH):
            chunk = {m: t[start : start + EVAL_BATCH] for m, t in inputs.items()}
            logits = model(chunk)
            correct += int((logits.argmax(dim=1).numpy() == labels[start : start + EVAL_BATCH]).sum())
    return correct / len(labels)


def pretrain(
    segments: Sequence[Segment],
    config: TrainConfig,
    encoder_cfg: EncoderConfig,
    specs: Mapping[str, ModalitySpec],
    *,
    stats: NormStats | None = None,
    augment_params: AugmentParams | None = None,
) -> TrainResult:
    """Self-supervised pre-training over two augmented views per batch."""
    if Stage(config.stage) is not Stage.PRETRAIN:
        raise StageMismatch(f"expected PRETRAIN config, got {config.stage}")
    if not segments:
        raise EmptyDataset("pre-training needs at least one segment")
    params = augment_params or AugmentParams(mixup_alpha=config.mixup_alpha)
    stats = stats or dataset_norm_stats(segments, specs)
    model = build_encoder(encoder_cfg, specs)
    opt = _optimizer(model.parameters(), config)
    epochs = effective_epochs(config)
    trace: list[EpochRecord] = []
    applied: set[str] = set()
    diverged = False

    for epoch in range(epochs):
        lr = cosine_lr(epoch, config)
        _set_lr(opt, lr)
        snapshot = _snapshot(model)
        order = make_rng(config.seed, "shuffle", epoch).permutation(len(segments))
        sums = np.zeros(4, dtype=np.float64)
        seen = 0
        for start in range(0, len(order), config.batch_size):
            idxs = [int(i) for i in order[start : start + config.batch_size]]
            batch = [segments[i] for i in idxs]
            audit: list[str] = []
            bundles = []
            try:
                for view in (0, 1):
                    plans = [
                        _stage_plan(
                            Stage.PRETRAIN,
                            derive_seed(config.seed, "plan", epoch, i, view),
                            params,
                            config.augmentations,
                        )
                        for i in idxs
                    ]
                    rngs = [make_rng(config.seed, "aug", epoch, i, view) for i in idxs]
                    inputs = assemble_inputs(
                        batch, specs, stats, plans=plans, rngs=rngs, audit=audit
                    )
                    bundles.append(model.encode_bundle(inputs))
                out = focal_loss(bundles[0], bundles[1], config)
            except NonFinite:
                diverged = True
                break
            opt.zero_grad()
            out.total.backward()
            opt.step()
            applied.update(audit)
            vals = out.detached()
            sums += np.array(
                [vals["total"], vals["shared"], vals["private"], vals["orthogonality"]]
            ) * len(batch)
            seen += len(batch)
        if diverged:
            model.load_state_dict(snapshot)
            break
        means = sums / max(seen, 1)
        trace.append(
            EpochRecord(
                epoch=epoch,
                stage=Stage.PRETRAIN.value,
                lr=lr,
                train_loss=float(means[0]),
                shared=float(means[1]),
                private=float(means[2]),
                orth=float(means[3]),
            )
        )

    meta = {
        "stage": Stage.PRETRAIN.value,
        "seed": config.seed,
        "encoder_config": encoder_config_to_dict(encoder_cfg),
        "train_config": train_config_to_dict(config),
        "norm_stats": stats.to_dict(),
        "epochs_run": len(trace),
        "diverged": diverged,
        "version": __version__,
    }
    return TrainResult(
        checkpoint=Checkpoint.from_module(model, meta),
        trace=trace,
        model=model,
        stats=stats,
        diverged=diverged,
        applied_ops=frozenset(applied),
    )


def _soft_labels(segments: Sequence[Segment], num_classes: int) -> np.ndarray:
    labels = []
    for seg in segments:
        if seg.label is None:
            raise SingleClassDataset("supervised fitting needs labeled segments")
        labels.append(as_soft_label(seg.label, num_classes))
    return np.stack(labels)


def _fit_classifier(
    model: SensingClassifier,
    config: TrainConfig,
    segments: Sequence[Segment],
    specs: Mapping[str, ModalitySpec],
    stats: NormStats,
    num_classes: int,
    *,
    val_segments: Sequence[Segment] | None,
    augment_params: AugmentParams | None,
    encoder_frozen: bool,
    keep_best_val: bool,
) -> tuple[list[EpochRecord], frozenset, bool, int | None]:
    params = augment_params or AugmentParams(mixup_alpha=config.mixup_alpha)
    soft = _soft_labels(segments, num_classes)
    hard = soft.argmax(axis=1)
    if len(np.unique(hard)) < 2:
        raise SingleClassDataset("training labels collapse to a single class")
    plan = _stage_plan(Stage(config.stage), 0, params, config.augmentations)
    use_mixup = "mixup" in plan.time_ops

    val_inputs = None
    val_labels = None
    if val_segments:
        if any(seg.label is None for seg in val_segments):
            raise SingleClassDataset("validation segments must be labeled")
        val_inputs = assemble_inputs(val_segments, specs, stats)
        val_labels = np.array([seg.label for seg in val_segments])

    opt = _optimizer(model.parameters(), config)
    epochs = effective_epochs(config)
    trace: list[EpochRecord] = []
    applied: set[str] = set()
    diverged = False
    best: tuple[float, int, dict[str, torch.Tensor]] | None = None
    stall = 0

    for epoch in range(epochs):
        lr = cosine_lr(epoch, config)
        _set_lr(opt, lr)
        snapshot = _snapshot(model)
        order = make_rng(config.seed, "shuffle", epoch).permutation(len(segments))
        loss_sum = 0.0
        correct = 0
        seen = 0
        for batch_idx, start in enumerate(range(0, len(order), config.batch_size)):
            idxs = [int(i) for i in order[start : start + config.batch_size]]
            batch = [segments[i] for i in idxs]
            batch_soft = soft[idxs]
            audit: list[str] = []
            if use_mixup:
                mix_rng = make_rng(config.seed, "mixup", epoch, batch_idx)
                lam = float(mix_rng.beta(params.mixup_alpha, params.mixup_alpha))
                partners = mix_rng.permutation(len(batch))
                mixed = []
                mixed_soft = np.empty_like(batch_soft)
                for j, seg in enumerate(batch):
                    other = batch[int(partners[j])]
                    waves, label = mixup(
                        (seg.waveforms, batch_soft[j]),
                        (other.waveforms, batch_soft[int(partners[j])]),
                        lam,
                    )
                    mixed.append(_with_waveforms(seg, waves))
                    mixed_soft[j] = label
                batch, batch_soft = mixed, mixed_soft
                audit.append("mixup")
            rngs = [make_rng(config.seed, "aug", epoch, i, 0) for i in idxs]
            freq_only = AugmentationPlan(plan.stage, (), plan.freq_ops, params)
            inputs = assemble_inputs(
                batch, specs, stats, plans=[freq_only] * len(batch), rngs=rngs, audit=audit
            )
            targets = torch.from_numpy(batch_soft)
            try:
                if encoder_frozen:
                    with torch.no_grad():
                        feats = model.features(inputs)
                    logits = model.head(feats)
                else:
                    logits = model(inputs)
                loss = -(targets * torch.log_softmax(logits, dim=1)).sum(dim=1).mean()
                if not bool(torch.isfinite(loss)):
                    raise NonFinite("loss")
            except NonFinite:
                diverged = True
                break
            opt.zero_grad()
            loss.backward()
            opt.step()
            applied.update(audit)
            loss_sum += float(loss.detach()) * len(batch)
            correct += int(
                (logits.detach().argmax(dim=1).numpy() == batch_soft.argmax(axis=1)).sum()
            )
            seen += len(batch)
        if diverged:
            model.load_state_dict(snapshot)
            break
        val_acc = None
        if val_inputs is not None:
            val_acc = _clean_accuracy(model, val_inputs, val_labels)
            if best is None or val_acc > best[0]:
                best = (val_acc, epoch, _snapshot(model))
                stall = 0
            else:
                stall += 1
        trace.append(
            EpochRecord(
                epoch=epoch,
                stage=Stage(config.stage).value,
                lr=lr,
                train_loss=loss_sum / max(seen, 1),
                train_acc=correct / max(seen, 1),
                val_acc=val_acc,
            )
        )
        if (
            config.early_stop_patience is not None
            and val_inputs is not None
            and stall > config.early_stop_patience
        ):
            break

    best_epoch = None
    if keep_best_val and best is not None and not diverged:
        model.load_state_dict(best[2])
        best_epoch = best[1]
    return trace, frozenset(applied), diverged, best_epoch


def train_supervised(
    segments: Sequence[Segment],
    config: TrainConfig,
    encoder_cfg: EncoderConfig,
    specs: Mapping[str, ModalitySpec],
    *,
    num_classes: int,
    val_segments: Sequence[Segment] | None = None,
    stats: NormStats | None = None,
    augment_params: AugmentParams | None = None,
) -> TrainResult:
    """Encoder plus fusion head from scratch; keeps the best-validation
    epoch's weights when a validation split is given."""
    if Stage(config.stage) is not Stage.SUPERVISED:
        raise StageMismatch(f"expected SUPERVISED config, got {config.stage}")
    if not segments:
        raise EmptyDataset("supervised training needs segments")
    stats = stats or dataset_norm_stats(segments, specs)
    model = build_classifier(
        encoder_cfg, specs, num_classes, HeadKind.SUPERVISED_FUSION
    )
    set_trainable(model, Stage.SUPERVISED)
    trace, applied, diverged, best_epoch = _fit_classifier(
        model,
        config,
        segments,
        specs,
        stats,
        num_classes,
        val_segments=val_segments,
        augment_params=augment_params,
        encoder_frozen=False,
        keep_best_val=True,
    )
    meta = {
        "stage": Stage.SUPERVISED.value,
        "seed": config.seed,
        "head_kind": HeadKind.SUPERVISED_FUSION.value,
        "num_classes": num_classes,
        "encoder_config": encoder_config_to_dict(encoder_cfg),
        "train_config": train_config_to_dict(config),
        "norm_stats": stats.to_dict(),
        "epochs_run": len(trace),
        "best_epoch": best_epoch,
        "diverged": diverged,
        "version": __version__,
    }
    return TrainResult(
        checkpoint=Checkpoint.from_module(model, meta),
        trace=trace,
        model=model,
        stats=stats,
        diverged=diverged,
        applied_ops=applied,
        best_epoch=best_epoch,
    )


def _rebuild_encoder(ckpt: Checkpoint, specs) -> tuple[MultimodalEncoder, EncoderConfig, NormStats]:
    encoder_cfg = encoder_config_from_dict(ckpt.meta["encoder_config"])
    stats = norm_stats_from_dict(ckpt.meta["norm_stats"])
    encoder = build_encoder(encoder_cfg, specs)
    encoder.load_state_dict(ckpt.to_state_dict())
    return encoder, encoder_cfg, stats


def finetune_linear(
    checkpoint: Checkpoint,
    segments: Sequence[Segment],
    config: TrainConfig,
    specs: Mapping[str, ModalitySpec],
    *,
    num_classes: int,
    val_segments: Sequence[Segment] | None = None,
    augment_params: AugmentParams | None = None,
) -> TrainResult:
    """Linear probe on a frozen pre-trained encoder.

    Normalization statistics travel with the checkpoint: the probe must
    see the representation the encoder was trained on.
    """
    if checkpoint.stage is not Stage.PRETRAIN:
        raise StageMismatch(f"probe needs a PRETRAIN checkpoint, got {checkpoint.stage}")
    if Stage(config.stage) is not Stage.FINETUNE:
        raise StageMismatch(f"expected FINETUNE config, got {config.stage}")
    if not segments:
        raise EmptyDataset("fine-tuning needs segments")
    encoder, encoder_cfg, stats = _rebuild_encoder(checkpoint, specs)
    model = build_classifier(
        replace(encoder_cfg, param_seed=config.seed),
        specs,
        num_classes,
        HeadKind.LINEAR_PROBE,
        encoder=encoder,
    )
    set_trainable(model, Stage.FINETUNE)
    trace, applied, diverged, _ = _fit_classifier(
        model,
        config,
        segments,
        specs,
        stats,
        num_classes,
        val_segments=val_segments,
        augment_params=augment_params,
        encoder_frozen=True,
        keep_best_val=False,
    )
    meta = {
        "stage": Stage.FINETUNE.value,
        "seed": config.seed,
        "head_kind": HeadKind.LINEAR_PROBE.value,
        "num_classes": num_classes,
        "encoder_config": encoder_config_to_dict(encoder_cfg),
        "train_config": train_config_to_dict(config),
        "norm_stats": stats.to_dict(),
        "source_stage": Stage.PRETRAIN.value,
        "source_seed": checkpoint.meta.get("seed"),
        "epochs_run": len(trace),
        "diverged": diverged,
        "version": __version__,
    }
    return TrainResult(
        checkpoint=Checkpoint.from_module(model, meta),
        trace=trace,
        model=model,
        stats=stats,
        diverged=diverged,
        applied_ops=applied,
    )


def finetune_supervised_baseline(
    checkpoint: Checkpoint,
    segments: Sequence[Segment],
    config: TrainConfig,
    specs: Mapping[str, ModalitySpec],
    *,
    num_classes: int,
    val_segments: Sequence[Segment] | None = None,
    augment_params: AugmentParams | None = None,
) -> TrainResult:
    """Retrain only a re-initialized final layer of a supervised model."""
    if checkpoint.stage is not Stage.SUPERVISED:
        raise StageMismatch(
            f"baseline fine-tune needs a SUPERVISED checkpoint, got {checkpoint.stage}"
        )
    if Stage(config.stage) is not Stage.SUPERVISED_FINETUNE:
        raise StageMismatch(f"expected SUPERVISED_FINETUNE config, got {config.stage}")
    if not segments:
        raise EmptyDataset("fine-tuning needs segments")
    encoder_cfg = encoder_config_from_dict(checkpoint.meta["encoder_config"])
    stats = norm_stats_from_dict(checkpoint.meta["norm_stats"])
    source_classes = int(checkpoint.meta["num_classes"])
    if source_classes != num_classes:
        raise CheckpointError(
            f"source model has {source_classes} classes, requested {num_classes}"
        )
    model = build_classifier(encoder_cfg, specs, num_classes, HeadKind.SUPERVISED_FUSION)
    model.load_state_dict(checkpoint.to_state_dict())
    reinit_final_layer(model, seed=config.seed)
    set_trainable(model, Stage.SUPERVISED_FINETUNE)
    trace, applied, diverged, _ = _fit_classifier(
        model,
        config,
        segments,
        specs,
        stats,
        num_classes,
        val_segments=val_segments,
        augment_params=augment_params,
        encoder_frozen=True,
        keep_best_val=False,
    )
    meta = {
        "stage": Stage.SUPERVISED_FINETUNE.value,
        "seed": config.seed,
        "head_kind": HeadKind.SUPERVISED_FUSION.value,
        "num_classes": num_classes,
        "encoder_config": encoder_config_to_dict(encoder_cfg),
        "train_config": train_config_to_dict(config),
        "norm_stats": stats.to_dict(),
        "source_stage": Stage.SUPERVISED.value,
        "source_seed": checkpoint.meta.get("seed"),
        "epochs_run": len(trace),
        "diverged": diverged,
        "version": __version__,
    }
    return TrainResult(
        checkpoint=Checkpoint.from_module(model, meta),
        trace=trace,
        model=model,
        stats=stats,
        diverged=diverged,
        applied_ops=applied,
    )


def load_model(
    checkpoint: Checkpoint, specs: Mapping[str, ModalitySpec]
) -> tuple[torch.nn.Module, NormStats]:
    """Rebuild the module a checkpoint describes and its normalization."""
    encoder_cfg = encoder_config_from_dict(checkpoint.meta["encoder_config"])
    stats = norm_stats_from_dict(checkpoint.meta["norm_stats"])
    if checkpoint.stage is Stage.PRETRAIN:
        encoder = build_encoder(encoder_cfg, specs)
        encoder.load_state_dict(checkpoint.to_state_dict())
        return encoder, stats
    model = build_classifier(
        encoder_cfg,
        specs,
        int(checkpoint.meta["num_classes"]),
        HeadKind(checkpoint.meta["head_kind"]),
    )
    model.load_state_dict(checkpoint.to_state_dict())
    model.eval()
    return model, stats
