"""Pipeline configuration: one JSON-serializable block with a stable hash."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

from .appearance import EditConfig
from .filtering import FilterThresholds


@dataclass(frozen=True)
class SceneConfig:
    count: int = 50
    height: int = 96
    width: int = 96
    num_classes: int = 4
    salient_min_fraction: float = 0.22
    salient_max_fraction: float = 0.40
    square_bias: float = 0.6


@dataclass(frozen=True)
class DenoiserTrainConfig:
    train_steps: int = 2500
    base_channels: int = 32
    emb_dim: int = 32
    lr: float = 2e-3
    batch_size: int = 16
    train_scenes: int = 200
    checkpoint: str | None = None


@dataclass(frozen=True)
class PipelineConfig:
    scenes: SceneConfig = SceneConfig()
    edit: EditConfig = EditConfig()
    thresholds: FilterThresholds = FilterThresholds()
    denoiser: DenoiserTrainConfig = DenoiserTrainConfig()
    plan: tuple[str, ...] = ("color", "size:0.2", "size:0.4")
    segmenter_temperature: float = 0.5
    filter_alpha: float = 2.0
    inpainter: str = "prototype"  # or "diffusion"
    benchmark_name: str = "toy-ea"
    seed: int = 0
    workers: int = 1

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def _build(cls, data: dict):
    fields = {f for f in cls.__dataclass_fields__}
    unknown = set(data) - fields
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> PipelineConfig:
    """Config from JSON with optional top-level overrides (e.g. --seed)."""
    data: dict = {}
    if path is not None:
        data = json.loads(Path(path).read_text())
    data.update(overrides or {})
    kwargs = dict(data)
    if "scenes" in kwargs:
        kwargs["scenes"] = _build(SceneConfig, kwargs["scenes"])
    if "edit" in kwargs:
        kwargs["edit"] = _build(EditConfig, kwargs["edit"])
    if "thresholds" in kwargs:
        kwargs["thresholds"] = _build(FilterThresholds, kwargs["thresholds"])
    if "denoiser" in kwargs:
        kwargs["denoiser"] = _build(DenoiserTrainConfig, kwargs["denoiser"])
    if "plan" in kwargs:
        kwargs["plan"] = tuple(kwargs["plan"])
    return _build(PipelineConfig, kwargs)


def save_config(config: PipelineConfig, path: str | Path):
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
