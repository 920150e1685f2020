"""Stochastic augmentations for waveforms and spectra.

Time-domain ops act on ``[channels, samples]`` arrays along the last axis
and always return new arrays.  The single frequency-domain op rotates the
complex spectrum and therefore preserves magnitudes exactly.  Mixup is a
batch-level op handled by the training loops; it lives here because it is
part of the supervised-stage augmentation pool.

An :class:`AugmentationPlan` binds a training stage to the subset of ops a
view will receive.  Pre-training plans draw each op independently with
``op_probability``; supervised and fine-tuning plans always contain exactly
mixup and phase shift.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from .datamodel import Spectrogram, Stage
from .errors import (
    AlreadyNormalized,
    IndivisibleLength,
    NonPositiveFactor,
    ShapeMismatch,
)
from .seeding import make_rng

TIME_OPS = ("permutation", "negation", "time_warp", "horizontal_flip", "magnitude_warp", "scaling")
FREQ_OPS = ("phase_shift",)
SUPERVISED_TIME_OPS = ("mixup",)

_STAGE_POOLS: dict[Stage, tuple[tuple[str, ...], tuple[str, ...]]] = {
    Stage.PRETRAIN: (TIME_OPS, FREQ_OPS),
    Stage.SUPERVISED: (SUPERVISED_TIME_OPS, FREQ_OPS),
    Stage.FINETUNE: (SUPERVISED_TIME_OPS, FREQ_OPS),
    Stage.SUPERVISED_FINETUNE: (SUPERVISED_TIME_OPS, FREQ_OPS),
}


def stage_op_pool(stage: Stage) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """(time ops, frequency ops) a stage is allowed to draw from."""
    return _STAGE_POOLS[Stage(stage)]


def negation(x: np.ndarray) -> np.ndarray:
    return -x


def horizontal_flip(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x[..., ::-1])


def scaling(x: np.ndarray, factor: float) -> np.ndarray:
    if factor <= 0:
        raise NonPositiveFactor(f"scale factor {factor} must be positive")
    return (x * factor).astype(x.dtype)


def permutation(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Split the time axis into ``k`` equal chunks and shuffle their order."""
    n = x.shape[-1]
    if not 2 <= k <= n:
        raise ValueError(f"chunk count {k} outside [2, {n}]")
    if n % k != 0:
        raise IndivisibleLength(f"{n} samples not divisible into {k} chunks")
    chunks = x.reshape(*x.shape[:-1], k, n // k)
    order = rng.permutation(k)
    return np.ascontiguousarray(chunks[..., order, :].reshape(x.shape))


def time_warp(
    x: np.ndarray, rng: np.random.Generator, n_knots: int = 4, sigma: float = 0.2
) -> np.ndarray:
    """Resample along a smooth random monotone remap of the time axis.

    ``n_knots`` interior control points get offsets ~ Normal(0, sigma * gap);
    endpoints stay fixed.  The cubic remap curve has its derivative clamped
    at 1e-3 and is rescaled so the first and last samples map to themselves.
    """
    if n_knots < 1:
        raise ValueError("n_knots must be at least 1")
    n = x.shape[-1]
    pos = np.linspace(0.0, n - 1.0, n_knots + 2)
    gap = (n - 1.0) / (n_knots + 1)
    y = pos.copy()
    y[1:-1] += rng.normal(0.0, sigma * gap, size=n_knots)
    curve = CubicSpline(pos, y)(np.arange(n))
    step = np.maximum(np.diff(curve), 1e-3)
    curve = np.concatenate([[0.0], np.cumsum(step)])
    curve *= (n - 1.0) / curve[-1]
    flat = np.atleast_2d(x)
    out = np.stack([np.interp(curve, np.arange(n), ch) for ch in flat])
    return out.reshape(x.shape).astype(x.dtype)


def magnitude_warp(
    x: np.ndarray, rng: np.random.Generator, n_knots: int = 4, sigma: float = 0.2
) -> np.ndarray:
    """Multiply by a smooth random envelope with knots ~ Normal(1, sigma)."""
    if n_knots < 2:
        raise ValueError("n_knots must be at least 2")
    n = x.shape[-1]
    pos = np.linspace(0.0, n - 1.0, n_knots)
    vals = rng.normal(1.0, sigma, size=n_knots)
    env = CubicSpline(pos, vals)(np.arange(n))
    return (x * env).astype(x.dtype)


def phase_shift(spec: Spectrogram, theta: float) -> Spectrogram:
    """Rotate every complex bin by ``theta`` radians; magnitudes unchanged.

    The plane dtype is preserved, so a 64-bit spectrogram keeps the
    rotation exact to machine precision.
    """
    if spec.normalized:
        raise AlreadyNormalized(f"{spec.modality}: phase shift precedes normalization")
    c, s = np.cos(theta), np.sin(theta)
    return Spectrogram(
        modality=spec.modality,
        real=(spec.real * c - spec.imag * s).astype(spec.real.dtype),
        imag=(spec.real * s + spec.imag * c).astype(spec.real.dtype),
    )


def mixup(
    a: tuple[Mapping[str, np.ndarray], np.ndarray],
    b: tuple[Mapping[str, np.ndarray], np.ndarray],
    lam: float,
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Convex combination of two labeled examples and their soft labels."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda {lam} outside [0, 1]")
    wa, ya = a
    wb, yb = b
    if set(wa) != set(wb):
        raise ShapeMismatch(f"modality sets differ: {sorted(wa)} vs {sorted(wb)}")
    mixed: dict[str, np.ndarray] = {}
    for m in wa:
        if wa[m].shape != wb[m].shape:
            raise ShapeMismatch(f"{m}: {wa[m].shape} vs {wb[m].shape}")
        mixed[m] = (lam * wa[m] + (1.0 - lam) * wb[m]).astype(wa[m].dtype)
    ya = np.asarray(ya, dtype=np.float32)
    yb = np.asarray(yb, dtype=np.float32)
    if ya.shape != yb.shape:
        raise ShapeMismatch(f"label shapes differ: {ya.shape} vs {yb.shape}")
    return mixed, lam * ya + (1.0 - lam) * yb


@dataclass(frozen=True)
class AugmentParams:
    """Shared knobs for the stochastic ops."""

    permutation_k_range: tuple[int, int] = (2, 8)
    warp_knots: int = 4
    warp_sigma: float = 0.2
    magnitude_knots: int = 4
    magnitude_sigma: float = 0.2
    scaling_range: tuple[float, float] = (0.5, 2.0)
    phase_range: tuple[float, float] = (-np.pi, np.pi)
    mixup_alpha: float = 0.2
    op_probability: float = 0.5


@dataclass(frozen=True)
class AugmentationPlan:
    """Ordered op subsets a single view will receive, bound to a stage."""

    stage: Stage
    time_ops: tuple[str, ...]
    freq_ops: tuple[str, ...]
    params: AugmentParams = field(default_factory=AugmentParams)

    def __post_init__(self) -> None:
        time_pool, freq_pool = stage_op_pool(self.stage)
        bad = [op for op in self.time_ops if op not in time_pool]
        bad += [op for op in self.freq_ops if op not in freq_pool]
        if bad:
            raise ValueError(f"ops {bad} not allowed in stage {self.stage.value}")

    @property
    def ops(self) -> tuple[str, ...]:
        return self.time_ops + self.freq_ops


def sample_plan(
    stage: Stage, seed: int, params: AugmentParams | None = None
) -> AugmentationPlan:
    """Draw a view's op subset for ``stage`` deterministically from ``seed``.

    Pre-training includes each pool op independently with
    ``params.op_probability``; the supervised stages always use their full
    two-op pool.
    """
    params = params or AugmentParams()
    stage = Stage(stage)
    time_pool, freq_pool = stage_op_pool(stage)
    if stage is not Stage.PRETRAIN:
        return AugmentationPlan(stage, time_pool, freq_pool, params)
    rng = make_rng(seed, "plan")
    keep = rng.random(len(time_pool) + len(freq_pool)) < params.op_probability
    time_ops = tuple(op for op, k in zip(time_pool, keep[: len(time_pool)]) if k)
    freq_ops = tuple(op for op, k in zip(freq_pool, keep[len(time_pool) :]) if k)
    return AugmentationPlan(stage, time_ops, freq_ops, params)


def _divisor_choices(n: int, k_range: tuple[int, int]) -> list[int]:
    lo, hi = k_range
    return [k for k in range(lo, min(hi, n) + 1) if n % k == 0]


def apply_time_plan(
    plan: AugmentationPlan,
    waveforms: Mapping[str, np.ndarray],
    rng: np.random.Generator,
    audit: list[str] | None = None,
) -> dict[str, np.ndarray]:
    """Apply the plan's time-domain ops to one segment's waveforms.

    Mixup is skipped here: it needs a partner example, so the training loop
    applies it at batch level.  Ops run in plan order; per-modality
    parameters are drawn in sorted modality order so the stream of random
    draws is reproducible.
    """
    out = {m: np.array(w, copy=True) for m, w in waveforms.items()}
    p = plan.params
    for op in plan.time_ops:
        if op == "mixup":
            continue
        for m in sorted(out):
            x = out[m]
            if op == "permutation":
                choices = _divisor_choices(x.shape[-1], p.permutation_k_range)
                if not choices:
                    continue
                k = int(choices[rng.integers(len(choices))])
                out[m] = permutation(x, k, rng)
            elif op == "negation":
                out[m] = negation(x)
            elif op == "time_warp":
                out[m] = time_warp(x, rng, p.warp_knots, p.warp_sigma)
            elif op == "horizontal_flip":
                out[m] = horizontal_flip(x)
            elif op == "magnitude_warp":
                out[m] = magnitude_warp(x, rng, p.magnitude_knots, p.magnitude_sigma)
            elif op == "scaling":
                out[m] = scaling(x, float(rng.uniform(*p.scaling_range)))
            else:
                raise ValueError(f"unknown time op {op!r}")
        if audit is not None:
            audit.append(op)
    return out


def apply_freq_plan(
    plan: AugmentationPlan,
    spectrograms: Mapping[str, Spectrogram],
    rng: np.random.Generator,
    audit: list[str] | None = None,
) -> dict[str, Spectrogram]:
    """Apply the plan's frequency-domain ops to one segment's spectra."""
    out = dict(spectrograms)
    p = plan.params
    for op in plan.freq_ops:
        if op == "phase_shift":
            for m in sorted(out):
                theta = float(rng.uniform(*p.phase_range))
                out[m] = phase_shift(out[m], theta)
        else:
            raise ValueError(f"unknown frequency op {op!r}")
        if audit is not None:
            audit.append(op)
    return out
