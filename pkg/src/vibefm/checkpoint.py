"""Self-describing binary checkpoint container.

Layout: 4-byte magic, 8-byte little-endian header length, canonical JSON
header, then raw little-endian tensor bytes concatenated in sorted name
order.  Canonical header encoding makes save -> load -> save produce
byte-identical files, which the reproducibility checks rely on.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .datamodel import (
    EncoderKind,
    LossWeights,
    OptimizerKind,
    SchedulerKind,
    Stage,
    TrainConfig,
)
from .encoders import EncoderConfig
from .errors import CheckpointError
from .preprocess import NormStats

MAGIC = b"VFM1"
_ALLOWED_DTYPES = {"<f4", "<f8", "<i8", "<i4"}


@dataclass
class Checkpoint:
    """Named tensors plus a JSON-serializable metadata dict."""

    meta: dict
    tensors: dict[str, np.ndarray]

    @property
    def stage(self) -> Stage:
        return Stage(self.meta["stage"])

    def serialize(self) -> bytes:
        entries = []
        payload = bytearray()
        for name in sorted(self.tensors):
            arr = np.ascontiguousarray(self.tensors[name])
            if arr.dtype.byteorder == ">":
                arr = arr.astype(arr.dtype.newbyteorder("<"))
            dtype = np.dtype(arr.dtype).newbyteorder("<").str
            if dtype not in _ALLOWED_DTYPES:
                raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
            raw = arr.astype(dtype).tobytes()
            entries.append(
                {
                    "name": name,
                    "dtype": dtype,
                    "shape": list(arr.shape),
                    "offset": len(payload),
                    "nbytes": len(raw),
                }
            )
            payload.extend(raw)
        header = json.dumps(
            {"format": 1, "meta": self.meta, "tensors": entries},
            sort_keys=True,
            separators=(",", ":"),
        ).encode()
        return MAGIC + len(header).to_bytes(8, "little") + header + bytes(payload)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.serialize())
        return path

    @staticmethod
    def load(path: str | Path) -> "Checkpoint":
        blob = Path(path).read_bytes()
        if len(blob) < 12 or blob[:4] != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        header_len = int.from_bytes(blob[4:12], "little")
        if 12 + header_len > len(blob):
            raise CheckpointError(f"{path}: truncated header")
        try:
            header = json.loads(blob[12 : 12 + header_len].decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
        payload = blob[12 + header_len :]
        tensors: dict[str, np.ndarray] = {}
        for entry in header["tensors"]:
            start, nbytes = entry["offset"], entry["nbytes"]
            if start + nbytes > len(payload):
                raise CheckpointError(f"{path}: truncated payload at {entry['name']}")
            arr = np.frombuffer(payload[start : start + nbytes], dtype=entry["dtype"])
            tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
        return Checkpoint(meta=header["meta"], tensors=tensors)

    def to_state_dict(self) -> dict[str, torch.Tensor]:
        return {k: torch.from_numpy(v.copy()) for k, v in self.tensors.items()}

    @staticmethod
    def from_module(module: torch.nn.Module, meta: dict) -> "Checkpoint":
        tensors = {
            k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()
        }
        return Checkpoint(meta=meta, tensors=tensors)


def encoder_config_to_dict(cfg: EncoderConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["kind"] = EncoderKind(cfg.kind).value
    for key in ("conv_channels", "conv_kernels", "conv_strides", "swin_depths", "swin_heads"):
        d[key] = list(d[key])
    return d


def encoder_config_from_dict(d: Mapping) -> EncoderConfig:
    kw = dict(d)
    kw["kind"] = EncoderKind(kw["kind"])
    for key in ("conv_channels", "conv_kernels", "conv_strides", "swin_depths", "swin_heads"):
        if key in kw:
            kw[key] = tuple(kw[key])
    return EncoderConfig(**kw)


def train_config_to_dict(cfg: TrainConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["stage"] = Stage(cfg.stage).value
    d["optimizer"] = OptimizerKind(cfg.optimizer).value
    d["scheduler"] = SchedulerKind(cfg.scheduler).value
    d["augmentations"] = list(cfg.augmentations)
    return d


def train_config_from_dict(d: Mapping) -> TrainConfig:
    kw = dict(d)
    kw["stage"] = Stage(kw["stage"])
    kw["optimizer"] = OptimizerKind(kw["optimizer"])
    kw["scheduler"] = SchedulerKind(kw["scheduler"])
    kw["augmentations"] = tuple(kw["augmentations"])
    if "loss_weights" in kw and isinstance(kw["loss_weights"], dict):
        kw["loss_weights"] = LossWeights(**kw["loss_weights"])
    return TrainConfig(**kw)


def norm_stats_to_dict(stats: NormStats) -> dict:
    return stats.to_dict()


def norm_stats_from_dict(d: Mapping) -> NormStats:
    return NormStats.from_dict(d)
