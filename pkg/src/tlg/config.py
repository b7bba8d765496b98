"""Run configuration: schema, YAML loading, dotted overrides and hashing."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import ConfigError


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True, validate_assignment=True)


class DataConfig(_Section):
    dataset: str = Field("synthetic", description="'synthetic' or a dataset directory")
    n_categories: int = Field(4, ge=1)
    exemplars_per_category: int = Field(20, ge=2)
    image_size: int = Field(64, ge=32)
    blur_radius: int = Field(2, ge=0)
    seed: int = 0
    fold: int = Field(0, ge=0)
    n_folds: int = Field(4, ge=1)
    folds_file: Optional[str] = Field(None, description="YAML listing test category ids per fold")
    shot: Literal[1, 5] = 1


class BackboneConfig(_Section):
    name: Literal["toy"] = "toy"
    seed: int = 0
    width_multiplier: int = Field(1, ge=1)


class LayersConfig(_Section):
    support: str = Field("3,9,12", description="tap indices, e.g. '3,9,12' or '0-12'")
    query: str = Field("0,4,10", description="tap indices, e.g. '0,4,10' or '0-12'")


class HAConfig(_Section):
    c_ha: int = Field(64, ge=1, description="common channel width after level equalization")
    init_std: float = Field(0.02, ge=0.0)
    init_seed: int = 0
    squeeze_channels: int = Field(16, ge=1)
    corr_mode: Literal["cross", "self"] = "cross"
    grid_size: Optional[int] = Field(None, ge=2, description="canonical grid; default image_size/8")


class HTConfig(_Section):
    lam: float = Field(10.0, gt=0.0, alias="lambda")
    tol: float = Field(1e-6, gt=0.0)
    max_iters: int = Field(200, ge=1)
    unrolled_iters: int = Field(20, ge=1)
    cost_threshold: float = Field(0.5, ge=0.0, le=1.0)
    support_residual_tap: int = Field(9, ge=0, le=12)
    query_residual_tap: int = Field(4, ge=0, le=12)
    d_k: Optional[int] = Field(None, ge=1, description="key width; default = feature channels")
    pool_size: int = Field(3, ge=1)


class HCConfig(_Section):
    d_text: int = Field(64, ge=4)
    bottleneck_ratio: int = Field(4, ge=1)
    rho_init: float = 0.2
    encoder: Literal["stub", "external"] = "stub"
    bank: str = Field("synthetic", description="'synthetic', 'pascal', 'coco' or a CSV path")
    match_source: Literal["label", "visual"] = "label"


class LossConfig(_Section):
    alpha: float = Field(1.4, ge=0.0)
    beta: float = Field(0.6, ge=0.0)
    binarize_targets: bool = False
    eps: float = Field(1e-7, gt=0.0, lt=0.5)


class ModulesConfig(_Section):
    ha: bool = True
    ht: bool = True
    hc: bool = True


class TrainConfig(_Section):
    epochs: int = Field(80, ge=1)
    batch_size: int = Field(16, ge=1)
    learning_rate: float = Field(4e-4, gt=0.0)
    weight_decay: float = Field(1e-4, ge=0.0)
    seed: int = 0
    episodes_per_epoch: int = Field(1000, ge=1)
    val_episodes: int = Field(100, ge=1)
    eval_episodes: int = Field(1000, ge=1)
    head_channels: int = Field(32, ge=2)


class Config(_Section):
    data: DataConfig = Field(default_factory=DataConfig)
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    layers: LayersConfig = Field(default_factory=LayersConfig)
    ha: HAConfig = Field(default_factory=HAConfig)
    ht: HTConfig = Field(default_factory=HTConfig)
    hc: HCConfig = Field(default_factory=HCConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    modules: ModulesConfig = Field(default_factory=ModulesConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)

    @field_validator("layers")
    @classmethod
    def _layers_parse(cls, v: LayersConfig) -> LayersConfig:
        from .backbone import LayerSelection

        LayerSelection.parse(v.support, v.query)
        return v

    def to_dict(self) -> dict:
        return self.model_dump(mode="json", by_alias=True)

    @property
    def grid_size(self) -> int:
        return self.ha.grid_size or max(2, self.data.image_size // 8)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _key_lines(text: str) -> dict[tuple, int]:
    """Map dotted key paths in a YAML document to 1-based line numbers."""
    lines: dict[tuple, int] = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return lines

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                path = prefix + (k.value,)
                lines[path] = k.start_mark.line + 1
                walk(v, path)

    walk(root, ())
    return lines


def _diagnostics(err: ValidationError, lines: dict[tuple, int], source: str) -> list[str]:
    out = []
    for e in err.errors():
        loc = tuple(str(p) for p in e["loc"])
        line = None
        for n in range(len(loc), 0, -1):
            if loc[:n] in lines:
                line = lines[loc[:n]]
                break
        where = f"{source}:{line}" if line else source
        out.append(f"{where}: {'.'.join(loc) or '<root>'}: {e['msg']}")
    return out


def _coerce(text: str) -> Any:
    return yaml.safe_load(text) if text.strip() else ""


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` overrides in order (last writer wins)."""
    raw = json.loads(json.dumps(raw))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"bad override {item!r}", [f"--set {item}: expected section.key=value"])
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        if len(parts) != 2:
            raise ConfigError(f"bad override {item!r}", [f"--set {item}: expected section.key=value"])
        section, field = parts
        raw.setdefault(section, {})
        if not isinstance(raw[section], dict):
            raise ConfigError(f"bad override {item!r}", [f"--set {item}: {section} is not a section"])
        raw[section][field] = _coerce(value)
    return raw


def build_config(raw: dict | None = None, overrides: list[str] | None = None,
                 source: str = "<config>", text: str | None = None) -> Config:
    raw = apply_overrides(raw or {}, overrides or [])
    try:
        return Config.model_validate(raw)
    except ValidationError as err:
        lines = _key_lines(text) if text else {}
        raise ConfigError(f"invalid configuration in {source}", _diagnostics(err, lines, source)) from None
    except ValueError as err:
        raise ConfigError(f"invalid configuration in {source}", [f"{source}: {err}"]) from None


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> Config:
    if path is None:
        return build_config({}, overrides)
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}", [f"{path}: no such file"])
    text = path.read_text()
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as err:
        mark = getattr(err, "problem_mark", None)
        line = f"{path}:{mark.line + 1}" if mark else str(path)
        raise ConfigError(f"cannot parse {path}", [f"{line}: {getattr(err, 'problem', err)}"]) from None
    if not isinstance(raw, dict):
        raise ConfigError(f"cannot parse {path}", [f"{path}:1: top level must be a mapping"])
    return build_config(raw, overrides, source=str(path), text=text)


def describe_keys() -> list[str]:
    """One ``section.key = default`` line per config key, for --help."""
    out = []
    for section, finfo in Config.model_fields.items():
        model = finfo.annotation
        for name, f in model.model_fields.items():
            key = f.alias or name
            default = f.get_default(call_default_factory=True)
            desc = f"  ({f.description})" if f.description else ""
            out.append(f"{section}.{key} = {json.dumps(default)}{desc}")
    return out
