from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vibefm.datamodel import Spectrogram, default_modalities
from vibefm.errors import (
    AlreadyNormalized,
    EmptyCollection,
    MisalignedStreams,
    StreamTooShort,
    UnknownModality,
)
from vibefm.preprocess import (
    STD_FLOOR,
    compute_norm_stats,
    interval_stft,
    model_input,
    normalize,
    segment_stream,
)
from conftest import make_segment, make_streams


def count_windows_oracle(span_s: float, segment_s: float, stride_s: float) -> int:
    """Reference linear scan: place windows until one no longer fits."""
    count = 0
    k = 0
    while k * stride_s + segment_s <= span_s + 1e-9:
        count += 1
        k += 1
    return count


def one_sided_energy_oracle(z: np.ndarray, n: int) -> float:
    """Time-domain energy implied by a one-sided spectrum of an even-length
    real signal: (|X_0|^2 + 2*sum(|X_k|^2, 0<k<n/2) + |X_{n/2}|^2) / n."""
    mags = np.abs(z) ** 2
    return float((mags[0] + 2.0 * mags[1:-1].sum() + mags[-1]) / n)


def naive_dft_oracle(x: np.ndarray) -> np.ndarray:
    n = len(x)
    k = np.arange(n // 2 + 1)[:, None]
    t = np.arange(n)[None, :]
    return (x[None, :] * np.exp(-2j * np.pi * k * t / n)).sum(axis=1)


@pytest.mark.parametrize("seconds,expected", [(60.0, 37), (10.0, 6), (2.0, 1)])
def test_segment_counts_match_oracle(specs, seconds, expected):
    streams = make_streams(specs, seconds)
    segs = segment_stream(streams, specs, overlap_ratio=0.2)
    assert len(segs) == expected
    assert len(segs) == count_windows_oracle(seconds, 2.0, 1.6)


def test_segment_start_times_and_alignment(specs):
    streams = make_streams(specs, 10.0)
    segs = segment_stream(streams, specs, overlap_ratio=0.2, run_id="runA")
    for k, seg in enumerate(segs):
        assert seg.start_time_s == pytest.approx(k * 1.6)
        assert seg.run_id == "runA"
        ac_start = int(round(seg.start_time_s * 8000))
        se_start = int(round(seg.start_time_s * 100))
        assert ac_start == 80 * se_start
        np.testing.assert_array_equal(
            seg.waveforms["acoustic"], streams["acoustic"][:, ac_start : ac_start + 16000]
        )
        np.testing.assert_array_equal(
            seg.waveforms["seismic"], streams["seismic"][:, se_start : se_start + 200]
        )


def test_segment_stream_too_short(specs):
    streams = make_streams(specs, 1.5)
    with pytest.raises(StreamTooShort):
        segment_stream(streams, specs)


def test_segment_stream_misaligned(specs):
    streams = make_streams(specs, 10.0)
    streams["seismic"] = streams["seismic"][:, :-12]  # 0.12s short, > 1 period
    with pytest.raises(MisalignedStreams):
        segment_stream(streams, specs)


def test_segment_stream_tolerates_sub_period_skew(specs):
    streams = make_streams(specs, 10.0)
    streams["acoustic"] = streams["acoustic"][:, :-40]  # 5ms < one seismic period
    segs = segment_stream(streams, specs)
    assert len(segs) == 5  # span shrinks to 9.995s, last window at 8.0s no longer fits


def test_segment_stream_unknown_modality(specs):
    streams = make_streams(specs, 4.0)
    streams["radar"] = np.zeros((1, 100), dtype=np.float32)
    with pytest.raises(UnknownModality):
        segment_stream(streams, specs)


@settings(max_examples=40, deadline=None)
@given(st.floats(min_value=2.0, max_value=90.0), st.sampled_from([0.0, 0.2, 0.5]))
def test_segment_count_formula_matches_linear_scan(seconds, overlap):
    specs = {"seismic": default_modalities()["seismic"]}
    n = int(round(seconds * 100))
    streams = {"seismic": np.zeros((1, n), dtype=np.float32)}
    segs = segment_stream(streams, specs, overlap_ratio=overlap)
    assert len(segs) == count_windows_oracle(n / 100, 2.0, 2.0 * (1 - overlap))


def test_interval_stft_shapes(specs):
    seg = make_segment(specs)
    spectra = interval_stft(seg, specs)
    assert spectra["acoustic"].shape == (1, 10, 801)
    assert spectra["seismic"].shape == (1, 10, 11)
    for s in spectra.values():
        assert not s.normalized
        assert s.real.dtype == np.float32


def test_interval_stft_matches_naive_dft(specs):
    seg = make_segment(specs, seed=3)
    spectra = interval_stft(seg, specs)
    x = seg.waveforms["seismic"][0]
    for i in range(10):
        expected = naive_dft_oracle(x[i * 20 : (i + 1) * 20].astype(np.float64))
        got = spectra["seismic"].to_complex()[0, i]
        np.testing.assert_allclose(got, expected, rtol=1e-4, atol=1e-4)


def test_interval_stft_energy_conservation(specs):
    seg = make_segment(specs, seed=7)
    spectra = interval_stft(seg, specs)
    for name, spec in specs.items():
        x = seg.waveforms[name].astype(np.float64)
        z = spectra[name].to_complex().astype(np.complex128)
        n = spec.interval_length
        for c in range(spec.channels):
            for i in range(spec.num_intervals):
                time_energy = float((x[c, i * n : (i + 1) * n] ** 2).sum())
                freq_energy = one_sided_energy_oracle(z[c, i], n)
                assert abs(time_energy - freq_energy) <= 1e-6 * max(time_energy, 1.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_energy_conservation_property(seed):
    specs = {"seismic": default_modalities()["seismic"]}
    rng = np.random.default_rng(seed)
    seg_waveform = rng.standard_normal((1, 200)).astype(np.float32)
    seg = make_segment(specs, seed=0)
    seg = type(seg)(
        {"seismic": seg_waveform}, 0, seg.domain_tag, "r", 0.0
    )
    z = interval_stft(seg, specs)["seismic"].to_complex()
    x = seg_waveform.astype(np.float64)
    for i in range(10):
        te = float((x[0, i * 20 : (i + 1) * 20] ** 2).sum())
        fe = one_sided_energy_oracle(z[0, i].astype(np.complex128), 20)
        assert abs(te - fe) <= 1e-6 * max(te, 1.0)


def test_pure_tone_concentrates_in_one_bin(specs):
    # Bin 5 of a 20-sample interval at 100 Hz spans 25 Hz exactly.
    t = np.arange(200) / 100.0
    tone = np.cos(2 * np.pi * 25.0 * t).astype(np.float32)[None, :]
    seg_specs = {"seismic": specs["seismic"]}
    seg = make_segment(seg_specs)
    seg = type(seg)({"seismic": tone}, 0, seg.domain_tag, "r", 0.0)
    z = interval_stft(seg, seg_specs)["seismic"].to_complex()
    mags = np.abs(z[0])  # [10, 11]
    for i in range(10):
        assert mags[i].argmax() == 5
        others = np.delete(mags[i], 5)
        assert others.max() < 1e-3 * mags[i, 5]


def zscore_oracle(values: np.ndarray) -> tuple[float, float]:
    mean = float(values.sum() / values.size)
    var = float(((values - mean) ** 2).sum() / values.size)
    return mean, float(np.sqrt(var))


def test_norm_stats_single_zero_spectrogram():
    zero = Spectrogram("seismic", np.zeros((1, 10, 11), np.float32), np.zeros((1, 10, 11), np.float32))
    stats = compute_norm_stats([zero])
    s = stats.per_modality["seismic"]
    assert s.real_mean == 0.0 and s.imag_mean == 0.0
    assert s.real_std == STD_FLOOR and s.imag_std == STD_FLOOR


def test_norm_stats_plus_minus_one():
    ones = np.ones((1, 10, 11), np.float32)
    a = Spectrogram("seismic", ones.copy(), np.zeros_like(ones))
    b = Spectrogram("seismic", -ones.copy(), np.zeros_like(ones))
    stats = compute_norm_stats([a, b])
    s = stats.per_modality["seismic"]
    assert s.real_mean == pytest.approx(0.0)
    assert s.real_std == pytest.approx(1.0)


def test_norm_stats_match_twopass_oracle(specs):
    segs = [make_segment(specs, seed=i) for i in range(4)]
    spectra = [sp for seg in segs for sp in interval_stft(seg, specs).values()]
    stats = compute_norm_stats(spectra)
    for name in specs:
        reals = np.concatenate(
            [sp.real.astype(np.float64).ravel() for sp in spectra if sp.modality == name]
        )
        mean, std = zscore_oracle(reals)
        s = stats.per_modality[name]
        assert s.real_mean == pytest.approx(mean, rel=1e-12)
        assert s.real_std == pytest.approx(std, rel=1e-12)


def test_norm_stats_empty_collection():
    with pytest.raises(EmptyCollection):
        compute_norm_stats([])


def test_normalize_and_double_normalize(specs):
    seg = make_segment(specs)
    spectra = interval_stft(seg, specs)
    stats = compute_norm_stats(list(spectra.values()))
    normed = normalize(spectra["acoustic"], stats)
    assert normed.normalized
    s = stats.per_modality["acoustic"]
    np.testing.assert_allclose(
        normed.real, (spectra["acoustic"].real - s.real_mean) / s.real_std, rtol=1e-5
    )
    with pytest.raises(AlreadyNormalized):
        normalize(normed, stats)
    with pytest.raises(AlreadyNormalized):
        compute_norm_stats([normed])


def test_normalize_unknown_modality(specs):
    seg = make_segment(specs)
    spectra = interval_stft(seg, specs)
    stats = compute_norm_stats([spectra["acoustic"]])
    with pytest.raises(UnknownModality):
        normalize(spectra["seismic"], stats)


def test_model_input_stacks_planes(specs):
    seg = make_segment(specs)
    spectra = interval_stft(seg, specs)
    x = model_input(spectra["acoustic"])
    assert x.shape == (2, 10, 801)
    np.testing.assert_array_equal(x[0], spectra["acoustic"].real[0])
    np.testing.assert_array_equal(x[1], spectra["acoustic"].imag[0])
