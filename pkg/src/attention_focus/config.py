"""Experiment configuration: nested dataclasses loaded from strict JSON."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any

from .backbone import ConfigError, VitConfig
from .gcd_head import HeadHyperparams
from .pruning import PruneConfig
from .synthdata import SynthSpec


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.1
    lr_final_ratio: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-5
    epochs: int = 30
    batch_size: int = 32

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 2:
            raise ConfigError("optim needs lr > 0, epochs >= 1, batch_size >= 2")


@dataclass(frozen=True)
class ExperimentConfig:
    backbone: VitConfig = field(default_factory=VitConfig)
    prune: PruneConfig = field(default_factory=PruneConfig)
    head: HeadHyperparams = field(default_factory=HeadHyperparams)
    data: SynthSpec = field(default_factory=SynthSpec)
    optim: OptimConfig = field(default_factory=OptimConfig)
    af: bool = True  # TIME modules present and trained
    query_training: str = "labeled"  # or "all"
    pooling: str = "mean"  # or "cls"
    freeze_earlier_blocks: bool = True
    time_hidden: int | None = None
    data_seed_follows_seed: bool = True
    seed: int = 0
    run_id: str = "run"
    output_dir: str = "runs"

    def __post_init__(self):
        if self.query_training not in ("labeled", "all"):
            raise ConfigError(f"query_training must be 'labeled' or 'all', got {self.query_training!r}")
        if self.pooling not in ("mean", "cls"):
            raise ConfigError(f"pooling must be 'mean' or 'cls', got {self.pooling!r}")
        needs_time = self.prune.strategy in ("adaptive", "fixed_k", "penultimate_only")
        if needs_time and not self.af:
            raise ConfigError(f"strategy {self.prune.strategy!r} needs TIME modules (af=true)")
        b, d = self.backbone, self.data
        if (b.image_side, b.patch_side, b.channels) != (d.image_side, d.patch_side, d.channels):
            raise ConfigError("backbone image geometry does not match the data spec")
        if (b.num_known_classes, b.num_total_classes) != (d.known_classes, d.num_classes):
            raise ConfigError("backbone class counts do not match the data spec")
        if self.prune.strategy == "fixed_k" and self.prune.fixed_k >= b.num_patches:
            raise ConfigError(f"fixed_k must be < N={b.num_patches}")

    @property
    def data_spec(self) -> SynthSpec:
        """The spec actually generated; its seed tracks the run seed unless pinned."""
        if self.data_seed_follows_seed:
            return replace(self.data, seed=self.seed)
        return self.data

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


PROFILES = {
    "desk": {},
    "paper": {"optim": {"epochs": 200, "batch_size": 128}},
}


def _build(cls, raw: dict, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown key(s): {', '.join(where + k for k in unknown)}")
    kwargs = {}
    for name, value in raw.items():
        sub = cls.__dataclass_fields__[name].default_factory
        nested = sub() if callable(sub) else None
        if is_dataclass(nested):
            kwargs[name] = _build(type(nested), value, f"{path}.{name}" if path else name)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def config_from_dict(raw: dict, profile: str | None = None) -> ExperimentConfig:
    raw = dict(raw)
    profile = raw.pop("profile", profile) or "desk"
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    cfg = _build(ExperimentConfig, _merge(PROFILES[profile], raw), "")
    env_seed = os.environ.get("AF_SEED")
    if env_seed is not None:
        try:
            cfg = replace(cfg, seed=int(env_seed))
        except ValueError as exc:
            raise ConfigError(f"AF_SEED must be an integer, got {env_seed!r}") from exc
    return cfg


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return config_from_dict(raw)


def with_overrides(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    """Replace fields, where nested sections accept dicts of their own fields."""
    resolved = {}
    for key, value in changes.items():
        current = getattr(cfg, key)
        resolved[key] = replace(current, **value) if isinstance(value, dict) and is_dataclass(current) else value
    return replace(cfg, **resolved)
