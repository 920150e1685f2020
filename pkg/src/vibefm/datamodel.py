"""Core value types: modality specs, segments, spectrograms, embeddings,
training configurations, and evaluation reports.

These types are plain dataclasses validated on construction.  Arrays held
by :class:`Segment` are marked read-only so downstream transforms must copy
rather than mutate in place.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    DimMismatch,
    Indivisible,
    NonFinite,
    ShapeMismatch,
    UnknownModality,
)


class DomainTag(str, enum.Enum):
    """Where a segment came from: field recordings or synthetic domains."""

    MOD_UNLABELED = "MOD_UNLABELED"
    CONTROL = "CONTROL"
    NOISY = "NOISY"
    SYNTH_A = "SYNTH_A"
    SYNTH_B = "SYNTH_B"


class Stage(str, enum.Enum):
    SUPERVISED = "SUPERVISED"
    PRETRAIN = "PRETRAIN"
    FINETUNE = "FINETUNE"
    SUPERVISED_FINETUNE = "SUPERVISED_FINETUNE"


class EncoderKind(str, enum.Enum):
    DEEPSENSE = "DEEPSENSE"
    SWIN = "SWIN"


class HeadKind(str, enum.Enum):
    LINEAR_PROBE = "LINEAR_PROBE"
    SUPERVISED_FUSION = "SUPERVISED_FUSION"


class Framework(str, enum.Enum):
    """Training framework compared by the evaluation grid."""

    SUPERVISED = "SUPERVISED"
    SUPERVISED_FINETUNE = "SUPERVISED_FINETUNE"
    FOCAL = "FOCAL"


class OptimizerKind(str, enum.Enum):
    ADAM = "ADAM"
    ADAMW = "ADAMW"


class SchedulerKind(str, enum.Enum):
    COSINE = "COSINE"


@dataclass(frozen=True)
class ModalitySpec:
    """Static description of one sensing modality.

    ``samples_per_segment`` must divide evenly into ``num_intervals`` so
    that the per-interval transform sees equal-length blocks.
    """

    name: str
    sample_rate_hz: int
    channels: int = 1
    num_intervals: int = 10
    segment_seconds: float = 2.0

    def __post_init__(self) -> None:
        if self.sample_rate_hz <= 0 or self.channels <= 0 or self.num_intervals <= 0:
            raise ValueError(f"non-positive field in modality spec {self.name!r}")
        if self.segment_seconds <= 0:
            raise ValueError("segment_seconds must be positive")
        n = self.sample_rate_hz * self.segment_seconds
        if abs(n - round(n)) > 1e-9:
            raise Indivisible(
                f"{self.name}: segment of {self.segment_seconds}s is not a whole "
                f"number of samples at {self.sample_rate_hz} Hz"
            )
        if round(n) % self.num_intervals != 0:
            raise Indivisible(
                f"{self.name}: {int(round(n))} samples per segment not divisible "
                f"by {self.num_intervals} intervals"
            )

    @property
    def samples_per_segment(self) -> int:
        return int(round(self.sample_rate_hz * self.segment_seconds))

    @property
    def interval_length(self) -> int:
        return self.samples_per_segment // self.num_intervals

    @property
    def spectral_bins(self) -> int:
        """One-sided bin count of the per-interval transform."""
        return self.interval_length // 2 + 1


def default_modalities(
    segment_seconds: float = 2.0, channels: Mapping[str, int] | None = None
) -> dict[str, ModalitySpec]:
    """Acoustic at 8 kHz plus seismic at 100 Hz, single channel each."""
    chans = dict(channels or {})
    return {
        "acoustic": ModalitySpec(
            "acoustic", 8000, chans.get("acoustic", 1), segment_seconds=segment_seconds
        ),
        "seismic": ModalitySpec(
            "seismic", 100, chans.get("seismic", 1), segment_seconds=segment_seconds
        ),
    }


@dataclass
class Segment:
    """A time-aligned multimodal window cut from one recording run.

    ``waveforms`` maps modality name to a ``[channels, samples]`` float32
    array.  ``label`` is ``None`` for unlabeled segments.
    """

    waveforms: dict[str, np.ndarray]
    label: int | None
    domain_tag: DomainTag
    run_id: str
    start_time_s: float

    def __post_init__(self) -> None:
        for arr in self.waveforms.values():
            arr.flags.writeable = False


def validate_segment(segment: Segment, specs: Mapping[str, ModalitySpec]) -> Segment:
    """Check shapes, dtypes, and finiteness of a segment against its specs."""
    if not segment.waveforms:
        raise ShapeMismatch("segment has no modalities")
    for name, arr in segment.waveforms.items():
        spec = specs.get(name)
        if spec is None:
            raise UnknownModality(f"no spec for modality {name!r}")
        expected = (spec.channels, spec.samples_per_segment)
        if arr.ndim != 2 or arr.shape != expected:
            raise ShapeMismatch(
                f"{name}: expected shape {expected}, got {tuple(arr.shape)}"
            )
        if not np.isfinite(arr).all():
            raise NonFinite(f"{name}: waveform contains NaN or Inf")
    return segment


@dataclass
class Spectrogram:
    """Complex per-interval spectrum stored as separate real/imag planes.

    Both planes have shape ``[channels, num_intervals, spectral_bins]``.
    """

    modality: str
    real: np.ndarray
    imag: np.ndarray
    normalized: bool = False

    def __post_init__(self) -> None:
        if self.real.shape != self.imag.shape:
            raise ShapeMismatch(
                f"{self.modality}: real {self.real.shape} vs imag {self.imag.shape}"
            )
        if self.real.ndim != 3:
            raise ShapeMismatch(
                f"{self.modality}: expected 3 axes, got {self.real.ndim}"
            )
        if not (np.isfinite(self.real).all() and np.isfinite(self.imag).all()):
            raise NonFinite(f"{self.modality}: spectrogram contains NaN or Inf")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.real.shape)  # type: ignore[return-value]

    def to_complex(self) -> np.ndarray:
        return self.real + 1j * self.imag


@dataclass
class EmbeddingBundle:
    """Per-modality embeddings with a designated shared/private split.

    Coordinates ``[:shared_dim]`` form the cross-modal shared subspace and
    the remainder is the modality-private subspace.  Arrays may be numpy or
    torch with shape ``[..., dim]`` and must agree on ``dim`` across
    modalities.
    """

    embeddings: dict[str, object]
    shared_dim: int

    def __post_init__(self) -> None:
        if not self.embeddings:
            raise DimMismatch("bundle has no modalities")
        dims = {v.shape[-1] for v in self.embeddings.values()}
        if len(dims) != 1:
            raise DimMismatch(f"embedding dims differ across modalities: {dims}")
        (dim,) = dims
        if not 0 < self.shared_dim < dim:
            raise DimMismatch(f"shared_dim {self.shared_dim} not in (0, {dim})")
        for name, v in self.embeddings.items():
            if not _all_finite(v):
                raise NonFinite(f"{name}: embedding contains NaN or Inf")

    @property
    def dim(self) -> int:
        return next(iter(self.embeddings.values())).shape[-1]

    @property
    def private_dim(self) -> int:
        return self.dim - self.shared_dim

    def shared(self, modality: str):
        return self.embeddings[modality][..., : self.shared_dim]

    def private(self, modality: str):
        return self.embeddings[modality][..., self.shared_dim :]

    @property
    def modalities(self) -> list[str]:
        return sorted(self.embeddings)


def _all_finite(v: object) -> bool:
    if isinstance(v, np.ndarray):
        return bool(np.isfinite(v).all())
    import torch

    return bool(torch.isfinite(v).all())


def split_embedding(bundle: EmbeddingBundle) -> dict[str, tuple[object, object]]:
    """Return ``{modality: (shared, private)}`` views of a bundle."""
    return {m: (bundle.shared(m), bundle.private(m)) for m in bundle.modalities}


@dataclass(frozen=True)
class LossWeights:
    shared: float = 1.0
    private: float = 1.0
    orthogonality: float = 1.0

    def __post_init__(self) -> None:
        if min(self.shared, self.private, self.orthogonality) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for one training stage.

    ``stage_defaults`` reproduces the published per-stage recipe; ``epochs``
    is the published count and ``epoch_scale`` shrinks it for desk-scale
    runs (``effective_epochs`` in the training module).
    """

    stage: Stage
    batch_size: int
    optimizer: OptimizerKind
    initial_lr: float
    scheduler: SchedulerKind
    lr_decay: float
    epochs: int
    augmentations: tuple[str, ...]
    seed: int = 0
    temperature: float = 0.07
    loss_weights: LossWeights = field(default_factory=LossWeights)
    epoch_scale: float = 1.0
    mixup_alpha: float = 0.2
    early_stop_patience: int | None = None

    def __post_init__(self) -> None:
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if self.initial_lr <= 0:
            raise ValueError("initial_lr must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must be in (0, 1]")
        if self.epochs <= 0:
            raise ValueError("epochs must be positive")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.epoch_scale <= 0:
            raise ValueError("epoch_scale must be positive")

    @staticmethod
    def stage_defaults(stage: Stage, **overrides: object) -> "TrainConfig":
        base = _STAGE_DEFAULTS[Stage(stage)]
        return replace(base, **overrides) if overrides else base


_STAGE_DEFAULTS: dict[Stage, TrainConfig] = {
    Stage.SUPERVISED: TrainConfig(
        stage=Stage.SUPERVISED,
        batch_size=128,
        optimizer=OptimizerKind.ADAMW,
        initial_lr=1e-4,
        scheduler=SchedulerKind.COSINE,
        lr_decay=0.2,
        epochs=500,
        augmentations=("mixup", "phase_shift"),
    ),
    Stage.PRETRAIN: TrainConfig(
        stage=Stage.PRETRAIN,
        batch_size=256,
        optimizer=OptimizerKind.ADAMW,
        initial_lr=1e-4,
        scheduler=SchedulerKind.COSINE,
        lr_decay=0.05,
        epochs=6000,
        augmentations=(
            "permutation",
            "negation",
            "time_warp",
            "horizontal_flip",
            "magnitude_warp",
            "scaling",
            "phase_shift",
        ),
    ),
    Stage.FINETUNE: TrainConfig(
        stage=Stage.FINETUNE,
        batch_size=256,
        optimizer=OptimizerKind.ADAM,
        initial_lr=1e-3,
        scheduler=SchedulerKind.COSINE,
        lr_decay=0.2,
        epochs=200,
        augmentations=("mixup", "phase_shift"),
    ),
    Stage.SUPERVISED_FINETUNE: TrainConfig(
        stage=Stage.SUPERVISED_FINETUNE,
        batch_size=256,
        optimizer=OptimizerKind.ADAM,
        initial_lr=1e-3,
        scheduler=SchedulerKind.COSINE,
        lr_decay=0.2,
        epochs=200,
        augmentations=("mixup", "phase_shift"),
    ),
}


@dataclass(frozen=True)
class EvalRow:
    """One cell of the robustness grid."""

    encoder: str
    framework: str
    label_ratio: float
    train_domain: str
    test_domain: str
    seed: int
    accuracy: float
    macro_f1: float

    def __post_init__(self) -> None:
        if not 0 < self.label_ratio <= 1:
            raise ValueError(f"label_ratio {self.label_ratio} outside (0, 1]")
        for name in ("accuracy", "macro_f1"):
            v = getattr(self, name)
            if not (math.isfinite(v) and 0 <= v <= 1):
                raise ValueError(f"{name} {v} outside [0, 1]")


@dataclass(frozen=True)
class CurvePoint:
    epoch: int
    train_accuracy: float
    eval_accuracy: float


@dataclass
class EvalReport:
    """Grid rows plus per-cell convergence curves keyed by cell id."""

    rows: list[EvalRow] = field(default_factory=list)
    curves: dict[str, list[CurvePoint]] = field(default_factory=dict)

    def sorted_rows(self) -> list[EvalRow]:
        return sorted(
            self.rows,
            key=lambda r: (
                r.encoder,
                r.framework,
                -r.label_ratio,
                r.train_domain,
                r.test_domain,
                r.seed,
            ),
        )


def one_hot(label: int, num_classes: int) -> np.ndarray:
    """Dense one-hot vector as float32."""
    if not 0 <= label < num_classes:
        raise ValueError(f"label {label} outside [0, {num_classes})")
    v = np.zeros(num_classes, dtype=np.float32)
    v[label] = 1.0
    return v


def as_soft_label(label: int | Sequence[float] | np.ndarray, num_classes: int) -> np.ndarray:
    """Coerce an integer or distribution label to a float32 vector."""
    if isinstance(label, (int, np.integer)):
        return one_hot(int(label), num_classes)
    arr = np.asarray(label, dtype=np.float32)
    if arr.shape != (num_classes,):
        raise ShapeMismatch(f"soft label shape {arr.shape} != ({num_classes},)")
    return arr
