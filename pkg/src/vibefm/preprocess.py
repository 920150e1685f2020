"""Waveform segmentation, per-interval spectra, and normalization.

The pipeline is: cut each run into overlapping fixed-length segments, split
every segment into equal time intervals, take the one-sided DFT of each
interval, then z-score the real and imaginary planes with statistics
computed on the training collection only.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .datamodel import DomainTag, ModalitySpec, Segment, Spectrogram, validate_segment
from .errors import (
    AlreadyNormalized,
    EmptyCollection,
    Indivisible,
    MisalignedStreams,
    ShapeMismatch,
    StreamTooShort,
    UnknownModality,
)

STD_FLOOR = 1e-8
_COUNT_EPS = 1e-9


def segment_stream(
    waveforms: Mapping[str, np.ndarray],
    specs: Mapping[str, ModalitySpec],
    *,
    overlap_ratio: float = 0.2,
    run_id: str = "",
    domain_tag: DomainTag = DomainTag.MOD_UNLABELED,
    label: int | None = None,
) -> list[Segment]:
    """Cut aligned multimodal streams into overlapping segments.

    Streams are ``[channels, samples]`` arrays covering the same time span;
    they may disagree by at most one sample period of the slowest modality.
    With segment length ``L`` seconds and overlap ``r``, window ``k`` starts
    at ``k * L * (1 - r)`` seconds and the count is
    ``floor((T - L) / (L * (1 - r))) + 1``.
    """
    if not waveforms:
        raise ShapeMismatch("no streams given")
    if not 0 <= overlap_ratio < 1:
        raise ValueError(f"overlap_ratio {overlap_ratio} outside [0, 1)")

    durations: dict[str, float] = {}
    for name, arr in waveforms.items():
        spec = specs.get(name)
        if spec is None:
            raise UnknownModality(f"no spec for modality {name!r}")
        if arr.ndim != 2 or arr.shape[0] != spec.channels:
            raise ShapeMismatch(
                f"{name}: expected [{spec.channels}, samples], got {tuple(arr.shape)}"
            )
        durations[name] = arr.shape[1] / spec.sample_rate_hz

    slowest_period = 1.0 / min(specs[n].sample_rate_hz for n in waveforms)
    if max(durations.values()) - min(durations.values()) > slowest_period + 1e-12:
        raise MisalignedStreams(
            f"stream durations differ by more than {slowest_period:.4f}s: {durations}"
        )

    seg_seconds = {specs[n].segment_seconds for n in waveforms}
    if len(seg_seconds) != 1:
        raise ShapeMismatch(f"modalities disagree on segment length: {seg_seconds}")
    (seg_s,) = seg_seconds

    span = min(durations.values())
    if span + _COUNT_EPS < seg_s:
        raise StreamTooShort(f"stream of {span:.3f}s shorter than segment {seg_s}s")

    stride_s = seg_s * (1.0 - overlap_ratio)
    count = int(np.floor((span - seg_s) / stride_s + _COUNT_EPS)) + 1

    segments: list[Segment] = []
    for k in range(count):
        start_s = k * stride_s
        cut: dict[str, np.ndarray] = {}
        for name, arr in waveforms.items():
            spec = specs[name]
            start = int(round(start_s * spec.sample_rate_hz))
            stop = start + spec.samples_per_segment
            if stop > arr.shape[1]:
                # Rounding pushed the final window past the end; clamp back.
                start = arr.shape[1] - spec.samples_per_segment
                stop = arr.shape[1]
            cut[name] = np.ascontiguousarray(arr[:, start:stop], dtype=np.float32)
        seg = Segment(
            waveforms=cut,
            label=label,
            domain_tag=domain_tag,
            run_id=run_id,
            start_time_s=start_s,
        )
        segments.append(validate_segment(seg, specs))
    return segments


def interval_stft(
    segment: Segment, specs: Mapping[str, ModalitySpec]
) -> dict[str, Spectrogram]:
    """One-sided DFT of each equal time interval, per modality.

    No tapering window and no overlap between intervals: each interval of
    ``interval_length`` samples maps to ``interval_length // 2 + 1`` complex
    bins, returned as separate real/imag planes.
    """
    validate_segment(segment, specs)
    out: dict[str, Spectrogram] = {}
    for name, arr in segment.waveforms.items():
        spec = specs[name]
        n = arr.shape[1]
        if n % spec.num_intervals != 0:
            raise Indivisible(
                f"{name}: {n} samples not divisible by {spec.num_intervals} intervals"
            )
        blocks = arr.reshape(spec.channels, spec.num_intervals, spec.interval_length)
        z = np.fft.rfft(blocks, axis=-1)
        out[name] = Spectrogram(
            modality=name,
            real=np.ascontiguousarray(z.real, dtype=np.float32),
            imag=np.ascontiguousarray(z.imag, dtype=np.float32),
        )
    return out


@dataclass(frozen=True)
class PlaneStats:
    real_mean: float
    real_std: float
    imag_mean: float
    imag_std: float


@dataclass(frozen=True)
class NormStats:
    """Per-modality z-score statistics for the real and imag planes."""

    per_modality: Mapping[str, PlaneStats]

    def to_dict(self) -> dict[str, dict[str, float]]:
        return {
            m: {
                "real_mean": s.real_mean,
                "real_std": s.real_std,
                "imag_mean": s.imag_mean,
                "imag_std": s.imag_std,
            }
            for m, s in sorted(self.per_modality.items())
        }

    @staticmethod
    def from_dict(d: Mapping[str, Mapping[str, float]]) -> "NormStats":
        return NormStats(
            {
                m: PlaneStats(
                    float(v["real_mean"]),
                    float(v["real_std"]),
                    float(v["imag_mean"]),
                    float(v["imag_std"]),
                )
                for m, v in d.items()
            }
        )


def compute_norm_stats(spectrograms: Iterable[Spectrogram]) -> NormStats:
    """Population mean/std per modality and plane over a training collection.

    Standard deviations are floored at ``STD_FLOOR`` so constant planes do
    not divide by zero.  Accumulation is in float64.
    """
    reals: dict[str, list[np.ndarray]] = {}
    imags: dict[str, list[np.ndarray]] = {}
    for spec in spectrograms:
        if spec.normalized:
            raise AlreadyNormalized(f"{spec.modality}: stats need raw spectrograms")
        reals.setdefault(spec.modality, []).append(spec.real.astype(np.float64).ravel())
        imags.setdefault(spec.modality, []).append(spec.imag.astype(np.float64).ravel())
    if not reals:
        raise EmptyCollection("no spectrograms given")

    stats: dict[str, PlaneStats] = {}
    for m in reals:
        r = np.concatenate(reals[m])
        i = np.concatenate(imags[m])
        stats[m] = PlaneStats(
            real_mean=float(r.mean()),
            real_std=float(max(r.std(), STD_FLOOR)),
            imag_mean=float(i.mean()),
            imag_std=float(max(i.std(), STD_FLOOR)),
        )
    return NormStats(stats)


def normalize(spec: Spectrogram, stats: NormStats) -> Spectrogram:
    """Z-score both planes using the modality's training statistics."""
    if spec.normalized:
        raise AlreadyNormalized(f"{spec.modality}: already normalized")
    s = stats.per_modality.get(spec.modality)
    if s is None:
        raise UnknownModality(f"no normalization stats for {spec.modality!r}")
    return Spectrogram(
        modality=spec.modality,
        real=((spec.real - s.real_mean) / s.real_std).astype(np.float32),
        imag=((spec.imag - s.imag_mean) / s.imag_std).astype(np.float32),
        normalized=True,
    )


def model_input(spec: Spectrogram) -> np.ndarray:
    """Stack real/imag planes into ``[2 * channels, intervals, bins]``."""
    return np.concatenate([spec.real, spec.imag], axis=0)
