"""On-disk dataset layout: one directory per run.

Each segment is stored as little-endian float32 binaries named
``<run_id>/<index>.<modality>.f32`` (C order), and every run directory
carries an ``index.json`` listing per-segment metadata: label, domain
tag, start time, and array shapes.  Reading validates shapes against
file sizes and returns segments in (run, index) order.
"""

from __future__ import annotations

import json
from collections import defaultdict
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .datamodel import DomainTag, ModalitySpec, Segment, validate_segment
from .errors import DatasetError, EmptyDataset

INDEX_NAME = "index.json"


def write_dataset(segments: Sequence[Segment], root: str | Path) -> Path:
    """Write segments grouped by run; returns the dataset root."""
    if not segments:
        raise EmptyDataset("nothing to write")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)

    by_run: dict[str, list[Segment]] = defaultdict(list)
    for seg in segments:
        by_run[seg.run_id].append(seg)

    for run_id, run_segments in by_run.items():
        run_dir = root / run_id
        run_dir.mkdir(exist_ok=True)
        entries = []
        for index, seg in enumerate(run_segments):
            files = {}
            shapes = {}
            for modality in sorted(seg.waveforms):
                arr = np.ascontiguousarray(seg.waveforms[modality], dtype="<f4")
                name = f"{index}.{modality}.f32"
                arr.tofile(run_dir / name)
                files[modality] = name
                shapes[modality] = list(arr.shape)
            entries.append(
                {
                    "index": index,
                    "label": seg.label,
                    "domain_tag": seg.domain_tag.value,
                    "start_time_s": seg.start_time_s,
                    "shapes": shapes,
                    "files": files,
                }
            )
        payload = {"run_id": run_id, "segments": entries}
        with open(run_dir / INDEX_NAME, "w") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
    return root


def read_dataset(
    root: str | Path, mods: Mapping[str, ModalitySpec] | None = None
) -> list[Segment]:
    """Load every run directory under root, in sorted (run, index) order.

    When modality specs are given, each segment is validated against them
    (shape, finiteness, known modalities).
    """
    root = Path(root)
    run_dirs = sorted(p for p in root.iterdir() if (p / INDEX_NAME).is_file())
    if not run_dirs:
        raise DatasetError(f"no run directories with {INDEX_NAME} under {root}")

    segments: list[Segment] = []
    for run_dir in run_dirs:
        try:
            with open(run_dir / INDEX_NAME) as fh:
                payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{run_dir / INDEX_NAME}: invalid JSON ({exc})") from exc
        if payload.get("run_id") != run_dir.name:
            raise DatasetError(
                f"{run_dir}: index run_id {payload.get('run_id')!r} does not "
                f"match directory name"
            )
        entries = payload.get("segments", [])
        for entry in sorted(entries, key=lambda e: e["index"]):
            waveforms = {}
            for modality, name in sorted(entry["files"].items()):
                path = run_dir / name
                if not path.is_file():
                    raise DatasetError(f"missing segment file {path}")
                shape = tuple(entry["shapes"][modality])
                expected = int(np.prod(shape)) * 4
                actual = path.stat().st_size
                if actual != expected:
                    raise DatasetError(
                        f"{path}: {actual} bytes, expected {expected} for shape {shape}"
                    )
                waveforms[modality] = np.fromfile(path, dtype="<f4").reshape(shape)
            try:
                tag = DomainTag(entry["domain_tag"])
            except ValueError as exc:
                raise DatasetError(
                    f"{run_dir}: unknown domain tag {entry['domain_tag']!r}"
                ) from exc
            label = entry["label"]
            seg = Segment(
                waveforms=waveforms,
                label=None if label is None else int(label),
                domain_tag=tag,
                run_id=payload["run_id"],
                start_time_s=float(entry["start_time_s"]),
            )
            if mods is not None:
                validate_segment(seg, mods)
            segments.append(seg)
    return segments
