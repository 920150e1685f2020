from __future__ import annotations

import csv
import math

import numpy as np
import pytest
import torch

from vibefm.datamodel import (
    DomainTag,
    EncoderKind,
    ModalitySpec,
    Segment,
    Stage,
    TrainConfig,
)
from vibefm.encoders import EncoderConfig, count_trainable_params
from vibefm.errors import (
    EmptyDataset,
    EpochOutOfRange,
    SingleClassDataset,
    StageMismatch,
)
from vibefm.preprocess import segment_stream
from vibefm.training import (
    EpochRecord,
    cosine_lr,
    effective_epochs,
    finetune_linear,
    finetune_supervised_baseline,
    load_model,
    predict,
    pretrain,
    train_supervised,
    write_metrics_csv,
)


@pytest.fixture(scope="module")
def small_specs():
    return {
        "acoustic": ModalitySpec("acoustic", 400),
        "seismic": ModalitySpec("seismic", 100),
    }


def toy_dataset(specs, classes=2, runs_per_class=2, seconds=6.8, seed=0):
    """Tone-plus-noise runs; class decides the tone frequency."""
    segments = []
    rng = np.random.default_rng(seed)
    for cls in range(classes):
        for r in range(runs_per_class):
            streams = {}
            for name, spec in specs.items():
                n = int(round(seconds * spec.sample_rate_hz))
                t = np.arange(n) / spec.sample_rate_hz
                freq = spec.sample_rate_hz * (0.05 + 0.08 * cls)
                tone = np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
                noise = 0.3 * rng.standard_normal(n)
                streams[name] = (tone + noise).astype(np.float32)[None, :]
            segments.extend(
                segment_stream(
                    streams,
                    specs,
                    run_id=f"c{cls}r{r}",
                    domain_tag=DomainTag.SYNTH_A,
                    label=cls,
                )
            )
    return segments


def tiny_encoder(kind=EncoderKind.DEEPSENSE, **kw):
    defaults = dict(
        kind=kind,
        embedding_dim=16,
        shared_dim=8,
        conv_channels=(4, 8),
        rnn_input_dim=8,
        rnn_hidden=8,
        rnn_layers=1,
        swin_embed_dim=8,
        swin_depths=(1, 1),
        swin_heads=(2, 2),
        fusion_hidden=8,
    )
    defaults.update(kw)
    return EncoderConfig(**defaults)


def pretrain_cfg(**kw):
    base = dict(epochs=2, epoch_scale=1.0, batch_size=8, seed=0)
    base.update(kw)
    return TrainConfig.stage_defaults(Stage.PRETRAIN, **base)


def supervised_cfg(**kw):
    base = dict(epochs=3, epoch_scale=1.0, batch_size=8, seed=0, initial_lr=1e-3)
    base.update(kw)
    return TrainConfig.stage_defaults(Stage.SUPERVISED, **base)


def finetune_cfg(**kw):
    base = dict(epochs=3, epoch_scale=1.0, batch_size=8, seed=0)
    base.update(kw)
    return TrainConfig.stage_defaults(Stage.FINETUNE, **base)


def test_effective_epochs_rounding():
    cfg = pretrain_cfg(epochs=6000, epoch_scale=0.01)
    assert effective_epochs(cfg) == 60
    assert effective_epochs(pretrain_cfg(epochs=3, epoch_scale=0.01)) == 1


def cosine_oracle(e, e_total, lr0, decay):
    lr_min = lr0 * decay
    if e_total == 1:
        return lr0
    return lr_min + 0.5 * (lr0 - lr_min) * (1 + math.cos(math.pi * e / (e_total - 1)))


def test_cosine_lr_matches_closed_form():
    cfg = pretrain_cfg(epochs=10, initial_lr=2e-3, lr_decay=0.05)
    for e in range(10):
        assert cosine_lr(e, cfg) == pytest.approx(
            cosine_oracle(e, 10, 2e-3, 0.05), rel=1e-12
        )
    assert cosine_lr(0, cfg) == pytest.approx(2e-3)
    assert cosine_lr(9, cfg) == pytest.approx(2e-3 * 0.05)


def test_cosine_lr_single_epoch_and_range():
    cfg = pretrain_cfg(epochs=1)
    assert cosine_lr(0, cfg) == cfg.initial_lr
    with pytest.raises(EpochOutOfRange):
        cosine_lr(1, cfg)
    with pytest.raises(EpochOutOfRange):
        cosine_lr(-1, pretrain_cfg(epochs=5))


def test_pretrain_smoke_and_trace(small_specs):
    data = toy_dataset(small_specs)
    result = pretrain(data, pretrain_cfg(), tiny_encoder(), small_specs)
    assert len(result.trace) == 2
    assert not result.diverged
    for i, rec in enumerate(result.trace):
        assert rec.epoch == i
        assert rec.stage == "PRETRAIN"
        assert rec.lr == pytest.approx(cosine_lr(i, pretrain_cfg()))
        assert math.isfinite(rec.train_loss)
        assert rec.shared is not None and rec.private is not None
        assert rec.orth is not None and 0 <= rec.orth <= 1
        assert rec.train_acc is None and rec.val_acc is None
    assert result.checkpoint.stage is Stage.PRETRAIN
    assert result.applied_ops <= {
        "permutation",
        "negation",
        "time_warp",
        "horizontal_flip",
        "magnitude_warp",
        "scaling",
        "phase_shift",
    }


def test_pretrain_bit_reproducible(small_specs):
    data = toy_dataset(small_specs)
    a = pretrain(data, pretrain_cfg(seed=5), tiny_encoder(), small_specs)
    b = pretrain(data, pretrain_cfg(seed=5), tiny_encoder(), small_specs)
    assert a.checkpoint.serialize() == b.checkpoint.serialize()
    assert a.trace == b.trace
    c = pretrain(data, pretrain_cfg(seed=6), tiny_encoder(), small_specs)
    assert c.checkpoint.serialize() != a.checkpoint.serialize()


def test_pretrain_rejects_empty_and_wrong_stage(small_specs):
    with pytest.raises(EmptyDataset):
        pretrain([], pretrain_cfg(), tiny_encoder(), small_specs)
    with pytest.raises(StageMismatch):
        pretrain(toy_dataset(small_specs), supervised_cfg(), tiny_encoder(), small_specs)


def test_supervised_training_learns_and_keeps_best(small_specs):
    data = toy_dataset(small_specs, seed=1)
    val = toy_dataset(small_specs, seed=2)
    cfg = supervised_cfg(epochs=6)
    result = train_supervised(
        data, cfg, tiny_encoder(), small_specs, num_classes=2, val_segments=val
    )
    assert len(result.trace) == 6
    assert result.trace[-1].train_acc > 0.5
    assert result.applied_ops <= {"mixup", "phase_shift"}
    val_accs = [r.val_acc for r in result.trace]
    assert result.best_epoch == int(np.argmax(val_accs))
    labels = np.array([s.label for s in val])
    preds = predict(result.model, val, small_specs, result.stats)
    acc = float((preds == labels).mean())
    assert acc == pytest.approx(max(val_accs), abs=1e-9)


def test_supervised_rejects_single_class(small_specs):
    data = [s for s in toy_dataset(small_specs) if s.label == 0]
    with pytest.raises(SingleClassDataset):
        train_supervised(
            data, supervised_cfg(), tiny_encoder(), small_specs, num_classes=2
        )


def test_finetune_probe_keeps_encoder_bits(small_specs):
    data = toy_dataset(small_specs, seed=3)
    pre = pretrain(data, pretrain_cfg(), tiny_encoder(), small_specs)
    encoder_before = {
        k: v.copy() for k, v in pre.checkpoint.tensors.items()
    }
    result = finetune_linear(
        pre.checkpoint,
        data,
        finetune_cfg(),
        small_specs,
        num_classes=2,
        val_segments=None,
    )
    after = result.checkpoint.tensors
    for k, v in encoder_before.items():
        np.testing.assert_array_equal(after[f"encoder.{k}"], v)
    assert result.applied_ops <= {"mixup", "phase_shift"}
    assert count_trainable_params(result.model, Stage.FINETUNE) == sum(
        p.numel() for p in result.model.head.parameters()
    )


def test_finetune_rejects_wrong_checkpoint_stage(small_specs):
    data = toy_dataset(small_specs)
    sup = train_supervised(
        data, supervised_cfg(), tiny_encoder(), small_specs, num_classes=2
    )
    with pytest.raises(StageMismatch):
        finetune_linear(
            sup.checkpoint, data, finetune_cfg(), small_specs, num_classes=2
        )
    pre = pretrain(data, pretrain_cfg(), tiny_encoder(), small_specs)
    with pytest.raises(StageMismatch):
        finetune_supervised_baseline(
            pre.checkpoint,
            data,
            TrainConfig.stage_defaults(Stage.SUPERVISED_FINETUNE, epochs=1),
            small_specs,
            num_classes=2,
        )


def test_supervised_baseline_retrains_only_final_layer(small_specs):
    data = toy_dataset(small_specs, seed=4)
    sup = train_supervised(
        data, supervised_cfg(), tiny_encoder(), small_specs, num_classes=2
    )
    cfg = TrainConfig.stage_defaults(
        Stage.SUPERVISED_FINETUNE, epochs=2, batch_size=8, seed=1
    )
    result = finetune_supervised_baseline(
        sup.checkpoint, data, cfg, small_specs, num_classes=2
    )
    for k, v in sup.checkpoint.tensors.items():
        if k.startswith("head.linear."):
            assert not np.array_equal(result.checkpoint.tensors[k], v)
        else:
            np.testing.assert_array_equal(result.checkpoint.tensors[k], v)


def test_divergence_keeps_last_finite_state(small_specs):
    data = toy_dataset(small_specs)
    cfg = supervised_cfg(initial_lr=1e18, epochs=4)
    result = train_supervised(
        data, cfg, tiny_encoder(), small_specs, num_classes=2
    )
    assert result.diverged
    assert len(result.trace) < 4
    for v in result.checkpoint.tensors.values():
        assert np.isfinite(v).all()


def test_pretrain_divergence_flag(small_specs):
    data = toy_dataset(small_specs)
    cfg = pretrain_cfg(initial_lr=1e18, epochs=3)
    result = pretrain(data, cfg, tiny_encoder(), small_specs)
    assert result.diverged
    for v in result.checkpoint.tensors.values():
        assert np.isfinite(v).all()


def test_swin_pretrain_smoke(small_specs):
    data = toy_dataset(small_specs)[:8]
    cfg = pretrain_cfg(epochs=1)
    result = pretrain(data, cfg, tiny_encoder(EncoderKind.SWIN), small_specs)
    assert len(result.trace) == 1
    assert math.isfinite(result.trace[0].train_loss)


def test_checkpoint_model_roundtrip_through_load(small_specs, tmp_path):
    data = toy_dataset(small_specs)
    sup = train_supervised(
        data, supervised_cfg(), tiny_encoder(), small_specs, num_classes=2
    )
    path = sup.checkpoint.save(tmp_path / "sup.ckpt")
    from vibefm.checkpoint import Checkpoint

    model, stats = load_model(Checkpoint.load(path), small_specs)
    preds_a = predict(sup.model, data, small_specs, sup.stats)
    preds_b = predict(model, data, small_specs, stats)
    np.testing.assert_array_equal(preds_a, preds_b)


def test_metrics_csv_roundtrip(tmp_path):
    trace = [
        EpochRecord(0, "PRETRAIN", 1e-4, 2.5, None, None, 1.2, 1.1, 0.2),
        EpochRecord(1, "PRETRAIN", 9.5e-5, 2.0, None, None, 1.0, 0.9, 0.1),
    ]
    path = write_metrics_csv(trace, tmp_path / "metrics.csv")
    with path.open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2
    assert rows[0]["stage"] == "PRETRAIN"
    assert float(rows[0]["lr"]) == 1e-4
    assert rows[0]["train_acc"] == ""
    assert float(rows[1]["orth"]) == 0.1
