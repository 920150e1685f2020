from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vibefm.augment import (
    AugmentationPlan,
    AugmentParams,
    FREQ_OPS,
    SUPERVISED_TIME_OPS,
    TIME_OPS,
    apply_freq_plan,
    apply_time_plan,
    horizontal_flip,
    magnitude_warp,
    mixup,
    negation,
    permutation,
    phase_shift,
    sample_plan,
    scaling,
    stage_op_pool,
    time_warp,
)
from vibefm.datamodel import Spectrogram, Stage, one_hot
from vibefm.errors import (
    AlreadyNormalized,
    IndivisibleLength,
    NonPositiveFactor,
    ShapeMismatch,
)
from vibefm.preprocess import interval_stft
from conftest import make_segment

arrays = st.integers(min_value=0, max_value=2**31 - 1).map(
    lambda s: np.random.default_rng(s).standard_normal((2, 40)).astype(np.float32)
)


@settings(max_examples=30, deadline=None)
@given(arrays)
def test_negation_is_involution(x):
    np.testing.assert_array_equal(negation(negation(x)), x)


@settings(max_examples=30, deadline=None)
@given(arrays)
def test_flip_is_involution(x):
    np.testing.assert_array_equal(horizontal_flip(horizontal_flip(x)), x)


@settings(max_examples=30, deadline=None)
@given(arrays, st.sampled_from([2, 4, 5, 8, 10, 20, 40]))
def test_permutation_preserves_multiset(x, k):
    out = permutation(x, k, np.random.default_rng(0))
    for c in range(x.shape[0]):
        np.testing.assert_array_equal(np.sort(out[c]), np.sort(x[c]))


def test_permutation_full_shuffle_when_k_equals_length():
    x = np.arange(40, dtype=np.float32)[None, :]
    out = permutation(x, 40, np.random.default_rng(1))
    assert not np.array_equal(out, x)
    np.testing.assert_array_equal(np.sort(out[0]), np.sort(x[0]))


def test_permutation_rejects_indivisible_and_bad_k():
    x = np.zeros((1, 40), dtype=np.float32)
    with pytest.raises(IndivisibleLength):
        permutation(x, 3, np.random.default_rng(0))
    with pytest.raises(ValueError):
        permutation(x, 1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        permutation(x, 41, np.random.default_rng(0))


def test_permutation_deterministic():
    x = np.random.default_rng(2).standard_normal((1, 200)).astype(np.float32)
    a = permutation(x, 5, np.random.default_rng(7))
    b = permutation(x, 5, np.random.default_rng(7))
    np.testing.assert_array_equal(a, b)


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_time_warp_stays_within_input_range(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 200)).astype(np.float32)
    out = time_warp(x, rng)
    assert out.shape == x.shape
    assert out.min() >= x.min() - 1e-6
    assert out.max() <= x.max() + 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_time_warp_fixes_endpoints(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 120)).astype(np.float32)
    out = time_warp(x, rng)
    np.testing.assert_allclose(out[:, 0], x[:, 0], atol=1e-5)
    np.testing.assert_allclose(out[:, -1], x[:, -1], atol=1e-5)


def test_time_warp_on_strong_offsets_remains_monotone_resample():
    # Large sigma exercises the derivative clamp; result must stay bounded.
    rng = np.random.default_rng(5)
    ramp = np.linspace(0, 1, 400, dtype=np.float32)[None, :]
    out = time_warp(ramp, rng, n_knots=6, sigma=5.0)
    assert out.min() >= 0.0 - 1e-6
    assert out.max() <= 1.0 + 1e-6
    assert np.all(np.diff(out[0]) >= -1e-6)  # warped ramp stays non-decreasing


def test_magnitude_warp_is_pointwise_envelope():
    rng = np.random.default_rng(3)
    ones = np.ones((1, 100), dtype=np.float32)
    env = magnitude_warp(ones, rng)
    x = np.random.default_rng(4).standard_normal((1, 100)).astype(np.float32)
    out = magnitude_warp(x, np.random.default_rng(3))
    np.testing.assert_allclose(out, x * env, rtol=1e-5)
    zeros = np.zeros((1, 100), dtype=np.float32)
    np.testing.assert_array_equal(magnitude_warp(zeros, rng), zeros)


def test_scaling():
    x = np.ones((1, 4), dtype=np.float32)
    np.testing.assert_array_equal(scaling(x, 2.0), 2 * x)
    with pytest.raises(NonPositiveFactor):
        scaling(x, 0.0)
    with pytest.raises(NonPositiveFactor):
        scaling(x, -1.5)


@settings(max_examples=25, deadline=None)
@given(
    st.integers(min_value=0, max_value=2**31 - 1),
    st.floats(min_value=-np.pi, max_value=np.pi),
)
def test_phase_shift_preserves_magnitudes(seed, theta):
    rng = np.random.default_rng(seed)
    spec = Spectrogram(
        "seismic",
        rng.standard_normal((1, 10, 11)).astype(np.float32),
        rng.standard_normal((1, 10, 11)).astype(np.float32),
    )
    out = phase_shift(spec, theta)
    np.testing.assert_allclose(
        np.abs(out.to_complex()), np.abs(spec.to_complex()), atol=1e-5
    )


def test_phase_shift_zero_and_pi():
    rng = np.random.default_rng(0)
    spec = Spectrogram(
        "acoustic",
        rng.standard_normal((1, 2, 5)).astype(np.float32),
        rng.standard_normal((1, 2, 5)).astype(np.float32),
    )
    same = phase_shift(spec, 0.0)
    np.testing.assert_allclose(same.real, spec.real, atol=1e-7)
    np.testing.assert_allclose(same.imag, spec.imag, atol=1e-7)
    flipped = phase_shift(spec, np.pi)
    np.testing.assert_allclose(flipped.real, -spec.real, atol=1e-6)
    np.testing.assert_allclose(flipped.imag, -spec.imag, atol=1e-6)


def test_phase_shift_rejects_normalized():
    spec = Spectrogram(
        "seismic",
        np.ones((1, 2, 3), dtype=np.float32),
        np.ones((1, 2, 3), dtype=np.float32),
        normalized=True,
    )
    with pytest.raises(AlreadyNormalized):
        phase_shift(spec, 0.5)


def test_mixup_endpoints_and_linearity():
    rng = np.random.default_rng(0)
    wa = {"m": rng.standard_normal((1, 8)).astype(np.float32)}
    wb = {"m": rng.standard_normal((1, 8)).astype(np.float32)}
    ya, yb = one_hot(0, 4), one_hot(2, 4)
    mixed_a, label_a = mixup((wa, ya), (wb, yb), 1.0)
    np.testing.assert_allclose(mixed_a["m"], wa["m"], atol=1e-7)
    np.testing.assert_allclose(label_a, ya)
    mixed, label = mixup((wa, ya), (wb, yb), 0.3)
    np.testing.assert_allclose(mixed["m"], 0.3 * wa["m"] + 0.7 * wb["m"], rtol=1e-5)
    assert label.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(label, 0.3 * ya + 0.7 * yb)


def test_mixup_rejects_mismatches():
    wa = {"m": np.zeros((1, 8), dtype=np.float32)}
    wb = {"m": np.zeros((1, 9), dtype=np.float32)}
    y = one_hot(0, 2)
    with pytest.raises(ShapeMismatch):
        mixup((wa, y), (wb, y), 0.5)
    with pytest.raises(ShapeMismatch):
        mixup((wa, y), ({"other": wa["m"]}, y), 0.5)
    with pytest.raises(ValueError):
        mixup((wa, y), (wa, y), 1.5)


def test_sample_plan_deterministic():
    for stage in Stage:
        a = sample_plan(stage, 123)
        b = sample_plan(stage, 123)
        assert a == b


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_pretrain_plans_draw_only_from_pretrain_pool(seed):
    plan = sample_plan(Stage.PRETRAIN, seed)
    assert set(plan.time_ops) <= set(TIME_OPS)
    assert set(plan.freq_ops) <= set(FREQ_OPS)
    assert "mixup" not in plan.ops


def test_pretrain_plans_vary_with_seed():
    plans = {sample_plan(Stage.PRETRAIN, s).ops for s in range(64)}
    assert len(plans) > 4


def test_supervised_stage_plans_are_fixed():
    for stage in (Stage.SUPERVISED, Stage.FINETUNE, Stage.SUPERVISED_FINETUNE):
        plan = sample_plan(stage, 9)
        assert plan.time_ops == SUPERVISED_TIME_OPS
        assert plan.freq_ops == FREQ_OPS


def test_plan_rejects_ops_outside_stage_pool():
    with pytest.raises(ValueError):
        AugmentationPlan(Stage.FINETUNE, ("negation",), ("phase_shift",))
    with pytest.raises(ValueError):
        AugmentationPlan(Stage.PRETRAIN, ("mixup",), ())


def test_stage_op_pool_contents():
    time_pool, freq_pool = stage_op_pool(Stage.PRETRAIN)
    assert len(time_pool) == 6 and freq_pool == ("phase_shift",)


def test_apply_time_plan_audit_and_determinism(specs):
    seg = make_segment(specs, seed=11)
    plan = sample_plan(Stage.PRETRAIN, 41)
    audit: list[str] = []
    out1 = apply_time_plan(plan, seg.waveforms, np.random.default_rng(5), audit)
    out2 = apply_time_plan(plan, seg.waveforms, np.random.default_rng(5))
    assert set(audit) <= set(plan.time_ops)
    for m in out1:
        np.testing.assert_array_equal(out1[m], out2[m])
        assert out1[m].shape == seg.waveforms[m].shape


def test_apply_freq_plan_preserves_magnitude(specs):
    seg = make_segment(specs, seed=12)
    spectra = interval_stft(seg, specs)
    plan = AugmentationPlan(Stage.PRETRAIN, (), ("phase_shift",))
    audit: list[str] = []
    out = apply_freq_plan(plan, spectra, np.random.default_rng(3), audit)
    assert audit == ["phase_shift"]
    for m in spectra:
        np.testing.assert_allclose(
            np.abs(out[m].to_complex()), np.abs(spectra[m].to_complex()), rtol=2e-4, atol=2e-3
        )


def test_empty_plan_is_identity(specs):
    seg = make_segment(specs, seed=13)
    plan = AugmentationPlan(Stage.PRETRAIN, (), ())
    out = apply_time_plan(plan, seg.waveforms, np.random.default_rng(0))
    for m in out:
        np.testing.assert_array_equal(out[m], seg.waveforms[m])
