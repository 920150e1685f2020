"""Tests for the on-disk dataset layout."""

import json

import numpy as np
import pytest

from vibefm.dataio import read_dataset, write_dataset
from vibefm.datamodel import DomainTag, default_modalities
from vibefm.errors import DatasetError, EmptyDataset
from vibefm.synthgen import SynthSpec, generate_dataset


@pytest.fixture(scope="module")
def specs():
    return default_modalities()


@pytest.fixture(scope="module")
def dataset(specs):
    spec = SynthSpec(seed=3, runs_per_class=1, duration_s=6.0)
    return generate_dataset(spec, DomainTag.SYNTH_A, specs)


def test_roundtrip_bit_exact(tmp_path, specs, dataset):
    write_dataset(dataset, tmp_path)
    loaded = read_dataset(tmp_path, specs)
    assert len(loaded) == len(dataset)
    for a, b in zip(dataset, loaded):
        assert (a.run_id, a.label, a.domain_tag, a.start_time_s) == (
            b.run_id,
            b.label,
            b.domain_tag,
            b.start_time_s,
        )
        for m in a.waveforms:
            np.testing.assert_array_equal(a.waveforms[m], b.waveforms[m])


def test_layout_matches_contract(tmp_path, dataset):
    write_dataset(dataset, tmp_path)
    run_dir = tmp_path / dataset[0].run_id
    assert (run_dir / "index.json").is_file()
    assert (run_dir / "0.acoustic.f32").is_file()
    assert (run_dir / "0.seismic.f32").is_file()
    first = dataset[0].waveforms["acoustic"]
    raw = np.fromfile(run_dir / "0.acoustic.f32", dtype="<f4")
    np.testing.assert_array_equal(raw.reshape(first.shape), first)


def test_read_order_is_sorted(tmp_path, specs, dataset):
    write_dataset(dataset, tmp_path)
    loaded = read_dataset(tmp_path, specs)
    keys = [(s.run_id, s.start_time_s) for s in loaded]
    assert keys == sorted(keys)


def test_empty_write_rejected(tmp_path):
    with pytest.raises(EmptyDataset):
        write_dataset([], tmp_path)


def test_missing_root_rejected(tmp_path):
    empty = tmp_path / "nothing"
    empty.mkdir()
    with pytest.raises(DatasetError):
        read_dataset(empty)


def test_truncated_file_rejected(tmp_path, specs, dataset):
    write_dataset(dataset, tmp_path)
    victim = tmp_path / dataset[0].run_id / "0.acoustic.f32"
    victim.write_bytes(victim.read_bytes()[:100])
    with pytest.raises(DatasetError):
        read_dataset(tmp_path, specs)


def test_corrupt_index_rejected(tmp_path, specs, dataset):
    write_dataset(dataset, tmp_path)
    (tmp_path / dataset[0].run_id / "index.json").write_text("{not json")
    with pytest.raises(DatasetError):
        read_dataset(tmp_path, specs)


def test_run_id_mismatch_rejected(tmp_path, specs, dataset):
    write_dataset(dataset, tmp_path)
    run_dir = tmp_path / dataset[0].run_id
    payload = json.loads((run_dir / "index.json").read_text())
    payload["run_id"] = "imposter"
    (run_dir / "index.json").write_text(json.dumps(payload))
    with pytest.raises(DatasetError):
        read_dataset(tmp_path, specs)


def test_unlabeled_segments_roundtrip(tmp_path, specs, dataset):
    from dataclasses import replace

    unlabeled = [replace(s, label=None) for s in dataset]
    write_dataset(unlabeled, tmp_path)
    loaded = read_dataset(tmp_path, specs)
    assert all(s.label is None for s in loaded)
