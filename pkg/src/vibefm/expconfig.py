"""Experiment configuration: TOML/JSON loading, overrides, manifests.

A config file describes one experiment end to end: modalities, the
synthetic data spec (or paths to written datasets), encoder and
per-stage training settings, the split, and the evaluation grid.  Stage
settings start from the published training defaults and apply only the
keys the file overrides.  Unknown keys anywhere are rejected rather than
ignored so typos cannot silently change an experiment.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

try:
    import tomllib as _toml
except ModuleNotFoundError:
    import tomli as _toml

from .datamodel import (
    DomainTag,
    EncoderKind,
    Framework,
    LossWeights,
    ModalitySpec,
    Stage,
    TrainConfig,
    default_modalities,
)
from .encoders import EncoderConfig
from .errors import ConfigError
from .evaluation import GridSpec, SplitSpec, StageConfigs
from .synthgen import NoiseSpec, SynthSpec

EXPERIMENT_KEYS = {"name", "seed", "out_dir", "num_classes"}
MODALITY_KEYS = {"sample_rate_hz", "channels", "num_intervals", "segment_seconds"}
NOISE_KEYS = {"background_std", "wind_band_power", "transient_rate"}
SYNTH_SCALAR_KEYS = {
    "seed",
    "num_classes",
    "runs_per_class",
    "duration_s",
    "shared_factor",
    "detune_std",
    "gain_range",
}
SYNTH_TABLE_KEYS = {
    "private_factor",
    "noise",
    "domain_shift",
    "wind_band_hz",
    "private_band_hz",
    "transient_freq_hz",
}
ENCODER_KEYS = {f.name for f in fields(EncoderConfig)}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"stage"}
STAGE_SECTIONS = {
    "pretrain": Stage.PRETRAIN,
    "supervised": Stage.SUPERVISED,
    "finetune": Stage.FINETUNE,
    "supervised_finetune": Stage.SUPERVISED_FINETUNE,
}
SPLIT_KEYS = {"ratios", "seed", "stratified"}
GRID_KEYS = {
    "frameworks",
    "encoders",
    "ratios",
    "train_domain",
    "test_domains",
    "seeds",
    "convergence_epochs",
}
TOP_KEYS = {"experiment", "modalities", "synth", "data", "encoder", "train", "split", "grid"}


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    seed: int
    out_dir: Path
    num_classes: int
    mods: Mapping[str, ModalitySpec]
    synth: SynthSpec | None
    data_paths: Mapping[DomainTag, Path]
    encoder: EncoderConfig
    stages: StageConfigs
    split: SplitSpec
    grid: GridSpec
    raw: Mapping[str, Any] = field(compare=False, repr=False, default_factory=dict)


def load_raw(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    try:
        if path.suffix == ".json":
            raw = json.loads(text)
        else:
            raw = _toml.loads(text)
    except (json.JSONDecodeError, _toml.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a table")
    return raw


def parse_literal(text: str) -> Any:
    """Parse one override value as a TOML literal, else keep the string."""
    try:
        return _toml.loads(f"v = {text}")["v"]
    except _toml.TOMLDecodeError:
        return text


def apply_overrides(raw: Mapping[str, Any], sets: list[str]) -> dict:
    """Apply dotted-path key=value overrides, returning a new mapping."""
    out = json.loads(json.dumps(raw))  # deep copy of plain data
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, value = item.split("=", 1)
        parts = [p for p in dotted.strip().split(".") if p]
        if not parts:
            raise ConfigError(f"override {item!r} has an empty key")
        node = out
        for part in parts[:-1]:
            nxt = node.setdefault(part, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {dotted}: {part} is not a table")
            node = nxt
        node[parts[-1]] = parse_literal(value.strip())
    return out


def _check_keys(mapping: Mapping, allowed: set[str], path: str) -> None:
    for key in mapping:
        if key not in allowed:
            raise ConfigError(f"unknown config key {path}.{key}" if path else f"unknown config key {key}")


def validate_keys(raw: Mapping[str, Any]) -> None:
    _check_keys(raw, TOP_KEYS, "")
    _check_keys(raw.get("experiment", {}), EXPERIMENT_KEYS, "experiment")
    for name, section in raw.get("modalities", {}).items():
        _check_keys(section, MODALITY_KEYS, f"modalities.{name}")
    synth = raw.get("synth", {})
    _check_keys(synth, SYNTH_SCALAR_KEYS | SYNTH_TABLE_KEYS, "synth")
    for table in ("noise", "domain_shift"):
        _check_keys(synth.get(table, {}), NOISE_KEYS, f"synth.{table}")
    _check_keys(raw.get("encoder", {}), ENCODER_KEYS, "encoder")
    train = raw.get("train", {})
    _check_keys(train, set(STAGE_SECTIONS), "train")
    for stage_name, section in train.items():
        _check_keys(section, TRAIN_KEYS, f"train.{stage_name}")
    _check_keys(raw.get("split", {}), SPLIT_KEYS, "split")
    _check_keys(raw.get("grid", {}), GRID_KEYS, "grid")
    for name in raw.get("data", {}):
        try:
            DomainTag(name.upper())
        except ValueError:
            raise ConfigError(f"unknown config key data.{name}") from None


def _enum(cls, value, path: str):
    try:
        return cls(str(value).upper())
    except ValueError:
        raise ConfigError(
            f"{path}: {value!r} is not one of {[e.value for e in cls]}"
        ) from None


def _tupled(value):
    return tuple(value) if isinstance(value, list) else value


def _build_mods(raw: Mapping) -> dict[str, ModalitySpec]:
    section = raw.get("modalities")
    if not section:
        return default_modalities()
    mods = {}
    for name, cfg in section.items():
        missing = MODALITY_KEYS - set(cfg)
        if missing:
            raise ConfigError(f"modalities.{name}: missing {sorted(missing)}")
        mods[name] = ModalitySpec(name=name, **cfg)
    return mods


def _build_synth(raw: Mapping, seed: int, num_classes: int) -> SynthSpec:
    section = dict(raw.get("synth", {}))
    kwargs: dict[str, Any] = {
        "seed": section.pop("seed", seed),
        "num_classes": section.pop("num_classes", num_classes),
    }
    if "noise" in section:
        kwargs["noise"] = NoiseSpec(**section.pop("noise"))
    if "gain_range" in section:
        kwargs["gain_range"] = tuple(section.pop("gain_range"))
    for key in ("wind_band_hz", "private_band_hz", "transient_freq_hz"):
        if key in section:
            kwargs[key] = {m: tuple(v) for m, v in section.pop(key).items()}
    kwargs.update(section)
    return SynthSpec(**kwargs)


def _build_encoder(raw: Mapping) -> EncoderConfig:
    section = dict(raw.get("encoder", {}))
    if "kind" in section:
        section["kind"] = _enum(EncoderKind, section["kind"], "encoder.kind")
    for key, value in list(section.items()):
        section[key] = _tupled(value)
    return EncoderConfig(**section)


def _build_stage(section: Mapping, stage: Stage) -> TrainConfig:
    overrides = dict(section)
    if "optimizer" in overrides:
        from .datamodel import OptimizerKind

        overrides["optimizer"] = _enum(OptimizerKind, overrides["optimizer"], "optimizer")
    if "scheduler" in overrides:
        from .datamodel import SchedulerKind

        overrides["scheduler"] = _enum(SchedulerKind, overrides["scheduler"], "scheduler")
    if "augmentations" in overrides:
        overrides["augmentations"] = tuple(overrides["augmentations"])
    if "loss_weights" in overrides:
        overrides["loss_weights"] = LossWeights(**overrides["loss_weights"])
    return TrainConfig.stage_defaults(stage, **overrides)


def _build_stages(raw: Mapping) -> StageConfigs:
    train = raw.get("train", {})
    built = {
        name: _build_stage(train.get(name, {}), stage)
        for name, stage in STAGE_SECTIONS.items()
    }
    return StageConfigs(**built)


def build_experiment(raw: Mapping[str, Any]) -> ExperimentConfig:
    validate_keys(raw)
    exp = raw.get("experiment", {})
    name = exp.get("name", "experiment")
    seed = int(exp.get("seed", 0))
    out_dir = Path(exp.get("out_dir", "out"))
    num_classes = int(exp.get("num_classes", 4))

    try:
        mods = _build_mods(raw)
        synth = _build_synth(raw, seed, num_classes)
        encoder = _build_encoder(raw)
        stages = _build_stages(raw)

        split_section = dict(raw.get("split", {}))
        if "ratios" in split_section:
            split_section["ratios"] = tuple(split_section["ratios"])
        split_section.setdefault("seed", seed)
        split = SplitSpec(**split_section)

        grid_section = dict(raw.get("grid", {}))
        if "frameworks" in grid_section:
            grid_section["frameworks"] = tuple(
                _enum(Framework, v, "grid.frameworks") for v in grid_section["frameworks"]
            )
        if "encoders" in grid_section:
            grid_section["encoders"] = tuple(
                _enum(EncoderKind, v, "grid.encoders") for v in grid_section["encoders"]
            )
        if "train_domain" in grid_section:
            grid_section["train_domain"] = _enum(
                DomainTag, grid_section["train_domain"], "grid.train_domain"
            )
        if "test_domains" in grid_section:
            grid_section["test_domains"] = tuple(
                _enum(DomainTag, v, "grid.test_domains") for v in grid_section["test_domains"]
            )
        for key in ("ratios", "seeds"):
            if key in grid_section:
                grid_section[key] = tuple(grid_section[key])
        grid = GridSpec(
            split=split, num_classes=num_classes, **grid_section
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    data_paths = {
        DomainTag(name.upper()): Path(path) for name, path in raw.get("data", {}).items()
    }
    return ExperimentConfig(
        name=name,
        seed=seed,
        out_dir=out_dir,
        num_classes=num_classes,
        mods=mods,
        synth=synth,
        data_paths=data_paths,
        encoder=encoder,
        stages=stages,
        split=split,
        grid=grid,
        raw=dict(raw),
    )


def load_experiment(path: str | Path, sets: list[str] | None = None) -> ExperimentConfig:
    raw = apply_overrides(load_raw(path), sets or [])
    return build_experiment(raw)


def config_hash(raw: Mapping[str, Any]) -> str:
    canonical = json.dumps(raw, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()


_BARE_KEY = set("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_-")


def _toml_key(key: str) -> str:
    if key and set(key) <= _BARE_KEY:
        return key
    return json.dumps(key)


def _toml_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ConfigError(f"cannot encode {type(value).__name__} as a TOML value")


def dump_toml(data: Mapping[str, Any], _prefix: str = "") -> str:
    """Minimal TOML writer for plain dict/list/scalar structures."""
    scalars = []
    tables = []
    for key, value in data.items():
        if isinstance(value, Mapping):
            tables.append((key, value))
        else:
            scalars.append((key, value))
    lines = []
    for key, value in scalars:
        lines.append(f"{_toml_key(key)} = {_toml_value(value)}")
    for key, value in tables:
        path = f"{_prefix}.{_toml_key(key)}" if _prefix else _toml_key(key)
        lines.append("")
        lines.append(f"[{path}]")
        lines.append(dump_toml(value, path))
    return "\n".join(lines).strip() + "\n"


def synth_spec_to_dict(spec: SynthSpec) -> dict:
    return {
        "seed": spec.seed,
        "num_classes": spec.num_classes,
        "runs_per_class": spec.runs_per_class,
        "duration_s": spec.duration_s,
        "shared_factor": spec.shared_factor,
        "detune_std": spec.detune_std,
        "gain_range": list(spec.gain_range),
        "private_factor": dict(spec.private_factor),
        "noise": {
            "background_std": spec.noise.background_std,
            "wind_band_power": spec.noise.wind_band_power,
            "transient_rate": spec.noise.transient_rate,
        },
        "domain_shift": dict(spec.domain_shift),
        "wind_band_hz": {k: list(v) for k, v in spec.wind_band_hz.items()},
        "private_band_hz": {k: list(v) for k, v in spec.private_band_hz.items()},
        "transient_freq_hz": {k: list(v) for k, v in spec.transient_freq_hz.items()},
    }


def versions() -> dict[str, str]:
    import numpy
    import torch

    from . import __version__

    return {
        "vibefm": __version__,
        "numpy": numpy.__version__,
        "torch": torch.__version__,
        "python": sys.version.split()[0],
    }


def write_manifest(
    out_dir: str | Path,
    *,
    command: str,
    cfg: ExperimentConfig,
    produced: list[str | Path],
) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "command": command,
        "experiment": cfg.name,
        "seed": cfg.seed,
        "config_hash": config_hash(cfg.raw),
        "config": cfg.raw,
        "versions": versions(),
        "produced": sorted(str(p) for p in produced),
    }
    path = out / "manifest.json"
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
    return path
