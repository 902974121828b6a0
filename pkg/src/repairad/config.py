"""Single YAML config with one section per subsystem.

Every default is embedded here; a config file only needs the keys it changes,
and ``--set section.key=value`` CLI flags override the file.  Unknown keys
fail loudly.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any

import yaml

from .backbone import Backbone, BackboneSpec, toy_spec, vit_base_14_spec
from .errors import ConfigurationError
from .synthesis import SynthesisConfig

# Stage-1/stage-2 iteration budgets for the reference benchmark scales.
ITERATION_BUDGETS = {
    "mvtec-ad": (10_000, 10_000),
    "visa": (10_000, 4_000),
    "real-iad": (50_000, 8_000),
    "hss-iad": (30_000, 5_000),
    "toy": (300, 200),
}

_SPEC_FIELD_NAMES = (
    "patch_size",
    "embed_dim",
    "depth",
    "num_heads",
    "tap_layers",
    "input_size",
    "resize_size",
    "mlp_ratio",
    "normalize_mean",
    "normalize_std",
)


@dataclasses.dataclass
class BackboneSection:
    """Encoder preset plus optional per-field spec overrides."""

    preset: str = "toy"  # "toy" | "vit-base-14"
    init_seed: int | None = 0
    weights: str | None = None
    patch_size: int | None = None
    embed_dim: int | None = None
    depth: int | None = None
    num_heads: int | None = None
    tap_layers: list[int] | None = None
    input_size: int | None = None
    resize_size: int | None = None
    mlp_ratio: float | None = None
    normalize_mean: list[float] | None = None
    normalize_std: list[float] | None = None

    def spec(self) -> BackboneSpec:
        if self.preset == "toy":
            base = toy_spec()
        elif self.preset == "vit-base-14":
            base = vit_base_14_spec()
        else:
            raise ConfigurationError(f"unknown backbone preset {self.preset!r}")
        overrides = {}
        for name in _SPEC_FIELD_NAMES:
            value = getattr(self, name)
            if value is not None:
                overrides[name] = tuple(value) if isinstance(value, list) else value
        return dataclasses.replace(base, **overrides) if overrides else base

    def build(self) -> Backbone:
        seed = self.init_seed if self.weights is None else None
        encoder = Backbone(self.spec(), seed=seed)
        if self.weights is not None:
            encoder.load_weights(self.weights)
        return encoder


@dataclasses.dataclass
class SynthesisSection:
    octave_scales: list[int] = dataclasses.field(default_factory=lambda: [2, 4, 8, 16])
    mask_quantile: float = 0.8
    opacity_min: float = 0.15
    opacity_max: float = 1.0
    resample_retries: int = 5
    foreground_method: str = "threshold"
    per_class_foreground: dict[str, str] = dataclasses.field(default_factory=dict)
    texture_dir: str | None = None
    mask_area_min: float = 0.05
    mask_area_max: float = 0.35

    def build(self) -> SynthesisConfig:
        return SynthesisConfig(
            octave_scales=tuple(self.octave_scales),
            mask_quantile=self.mask_quantile,
            opacity_range=(self.opacity_min, self.opacity_max),
            resample_retries=self.resample_retries,
            foreground_method=self.foreground_method,
            per_class_foreground=dict(self.per_class_foreground),
            texture_dir=self.texture_dir,
            mask_area_band=(self.mask_area_min, self.mask_area_max),
        )


@dataclasses.dataclass
class RepairNetSection:
    drop_rate: float = 0.4
    mask_ratio: float = 0.4


@dataclasses.dataclass
class SegnetSection:
    alpha_t: float = 0.25
    gamma: float = 2.0
    variant: str = "conv-upsample"


@dataclasses.dataclass
class StageSection:
    iterations: int
    batch_size: int
    lr: float
    betas: list[float]
    weight_decay: float
    optimizer: str


def _default_stage1() -> StageSection:
    return StageSection(
        iterations=300,
        batch_size=8,
        lr=2e-3,
        betas=[0.9, 0.999],
        weight_decay=1e-4,
        optimizer="stable-adamw+amsgrad",
    )


def _default_stage2() -> StageSection:
    return StageSection(
        iterations=200,
        batch_size=16,
        lr=1e-4,
        betas=[0.9, 0.999],
        weight_decay=0.0,
        optimizer="adamw",
    )


@dataclasses.dataclass
class TrainerSection:
    stage1: StageSection = dataclasses.field(default_factory=_default_stage1)
    stage2: StageSection = dataclasses.field(default_factory=_default_stage2)
    seed: int = 0
    use_nrar: bool = True


@dataclasses.dataclass
class ScoringSection:
    lambda1: float = 0.7
    lambda2: float = 0.3
    top_count: int | None = None
    fpr_limit: float = 0.3
    mask_seed: int = 2024


@dataclasses.dataclass
class DatasetSection:
    root: str = ""
    layout: str = "mvtec-style"


@dataclasses.dataclass
class Config:
    backbone: BackboneSection = dataclasses.field(default_factory=BackboneSection)
    synthesis: SynthesisSection = dataclasses.field(default_factory=SynthesisSection)
    repair_net: RepairNetSection = dataclasses.field(default_factory=RepairNetSection)
    segnet: SegnetSection = dataclasses.field(default_factory=SegnetSection)
    trainer: TrainerSection = dataclasses.field(default_factory=TrainerSection)
    scoring: ScoringSection = dataclasses.field(default_factory=ScoringSection)
    dataset: DatasetSection = dataclasses.field(default_factory=DatasetSection)

    def validate(self) -> "Config":
        t = self.trainer
        for stage in (t.stage1, t.stage2):
            if stage.iterations < 0 or stage.batch_size <= 0 or stage.lr < 0:
                raise ConfigurationError("stage iterations/batch/lr must be non-negative")
        if self.scoring.lambda1 + self.scoring.lambda2 <= 0:
            raise ConfigurationError("lambda1 + lambda2 must be positive")
        if not 0 <= self.repair_net.mask_ratio <= 1:
            raise ConfigurationError("mask_ratio outside [0, 1]")
        if not 0 <= self.repair_net.drop_rate < 1:
            raise ConfigurationError("drop_rate outside [0, 1)")
        return self


def default_config() -> Config:
    return Config()


def _build_section(cls, data: Any, path: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"config section {path!r} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigurationError(f"unknown keys in {path!r}: {sorted(unknown)}")
    kwargs = {}
    for name in fields:
        if name not in data:
            continue
        value = data[name]
        if name in ("stage1", "stage2"):
            base = dataclasses.asdict(_default_stage1() if name == "stage1" else _default_stage2())
            base.update(value or {})
            kwargs[name] = _build_section(StageSection, base, f"{path}.{name}")
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict | None) -> Config:
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigurationError("config root must be a mapping")
    sections = {f.name: f for f in dataclasses.fields(Config)}
    unknown = set(data) - set(sections)
    if unknown:
        raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
    kwargs = {}
    for name, field in sections.items():
        if name in data:
            kwargs[name] = _build_section(field.default_factory, data[name], name)
    return Config(**kwargs).validate()


def config_to_dict(config: Config) -> dict:
    return dataclasses.asdict(config)


def load_config(path) -> Config:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    return config_from_dict(data)


def save_config(config: Config, path) -> None:
    Path(path).write_text(yaml.safe_dump(config_to_dict(config), sort_keys=False))


def apply_overrides(config: Config, overrides: list[str]) -> Config:
    """Apply dotted ``section.key=value`` overrides (values parsed as YAML)."""
    data = config_to_dict(config)
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigurationError(f"unknown override path {key!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigurationError(f"unknown override key {key!r}")
        node[parts[-1]] = yaml.safe_load(raw)
    return config_from_dict(data)
