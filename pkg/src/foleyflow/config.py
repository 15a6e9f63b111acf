"""Model, training and sampling configuration.

Configurations are frozen dataclasses. They can be built from named presets,
from a plain ``key = value`` text file, or from CLI overrides layered on top
of either.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping


class ConfigError(ValueError):
    """Raised for invalid or unknown configuration values."""


@dataclass(frozen=True)
class ModelConfig:
    n_mm_blocks: int = 4
    n_single_blocks: int = 8
    hidden_dim: int = 448
    latent_dim: int = 20
    latent_fps: float = 31.25
    visual_feat_dim: int = 1024
    text_feat_dim: int = 1024
    sync_feat_dim: int = 768
    visual_fps: float = 8.0
    sync_fps: float = 24.0
    text_len: int = 77
    n_heads: int = 0  # 0 -> hidden_dim // 64
    mlp_ratio: float = 4.0
    time_embed_dim: int = 256
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.n_heads == 0:
            object.__setattr__(self, "n_heads", max(1, self.hidden_dim // 64))
        for name in ("n_mm_blocks", "n_single_blocks"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("hidden_dim", "latent_dim", "visual_feat_dim", "text_feat_dim",
                     "sync_feat_dim", "text_len", "time_embed_dim"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.hidden_dim % self.n_heads:
            raise ConfigError(
                f"hidden_dim={self.hidden_dim} not divisible by n_heads={self.n_heads}")
        if (self.hidden_dim // self.n_heads) % 2:
            raise ConfigError("head dimension must be even for rotary embeddings")
        if self.time_embed_dim % 2:
            raise ConfigError("time_embed_dim must be even")
        if not self.latent_fps > self.visual_fps > 0:
            raise ConfigError("require latent_fps > visual_fps > 0")
        if self.sync_fps <= 0:
            raise ConfigError("sync_fps must be positive")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.n_heads

    @property
    def mlp_dim(self) -> int:
        return int(round(self.hidden_dim * self.mlp_ratio))

    def audio_len(self, duration_sec: float) -> int:
        return _frames(duration_sec, self.latent_fps)

    def visual_len(self, duration_sec: float) -> int:
        return _frames(duration_sec, self.visual_fps)


def _frames(duration_sec: float, fps: float) -> int:
    n = int(round(duration_sec * fps))
    if n < 1:
        raise ConfigError(f"duration {duration_sec}s yields no frames at {fps} fps")
    return n


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-4
    warmup_steps: int = 1000
    total_steps: int = 300_000
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 1e-6
    mask_prob: float = 0.1
    dup_factor: int = 5
    ema_rel_width: float = 0.05
    batch_size: int = 512
    seed: int = 0
    grad_clip: float = 1.0
    duration_sec: float = 8.0

    def __post_init__(self):
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ConfigError("mask_prob must lie in [0, 1]")
        if self.warmup_steps >= self.total_steps:
            raise ConfigError("warmup_steps must be < total_steps")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        for name in ("base_lr", "ema_rel_width", "total_steps", "batch_size",
                     "dup_factor", "duration_sec"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.weight_decay < 0 or self.grad_clip <= 0:
            raise ConfigError("weight_decay must be >= 0 and grad_clip > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")


@dataclass(frozen=True)
class SampleConfig:
    n_steps: int = 25
    cfg_strength: float = 4.5
    duration_sec: float = 8.0
    seed: int = 0

    def __post_init__(self):
        if self.n_steps < 1:
            raise ConfigError("n_steps must be >= 1")
        if self.duration_sec <= 0:
            raise ConfigError("duration_sec must be positive")


_PRESETS: dict[str, dict[str, Any]] = {
    "S-16kHz": dict(n_mm_blocks=4, n_single_blocks=8, hidden_dim=448,
                    latent_dim=20, latent_fps=31.25),
    "S-44.1kHz": dict(n_mm_blocks=4, n_single_blocks=8, hidden_dim=448,
                      latent_dim=40, latent_fps=43.07),
    "M-44.1kHz": dict(n_mm_blocks=4, n_single_blocks=8, hidden_dim=896,
                      latent_dim=40, latent_fps=43.07),
    "L-44.1kHz": dict(n_mm_blocks=7, n_single_blocks=14, hidden_dim=896,
                      latent_dim=40, latent_fps=43.07),
    "tiny": dict(n_mm_blocks=2, n_single_blocks=2, hidden_dim=64,
                 latent_dim=8, latent_fps=31.25),
}

PRESET_NAMES = tuple(_PRESETS)


def preset(name: str, **overrides) -> ModelConfig:
    """Return the ModelConfig of a named model variant."""
    try:
        values = dict(_PRESETS[name])
    except KeyError:
        raise ConfigError(
            f"unknown preset {name!r}; valid presets: {', '.join(PRESET_NAMES)}") from None
    values.update(overrides)
    return ModelConfig(**values)


def lr_at_step(step: int, cfg: TrainConfig) -> float:
    """Learning rate after linear warmup with two tenfold drops.

    The drops happen at 80% and 90% of ``total_steps``; their values scale
    with ``base_lr`` (1e-5 and 1e-6 for the default 1e-4). The schedule is
    monotone on each side of the warmup only when the warmup ends before
    the first drop.
    """
    if step < cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    if step < 0.8 * cfg.total_steps:
        return cfg.base_lr
    if step < 0.9 * cfg.total_steps:
        return cfg.base_lr * 0.1
    return cfg.base_lr * 0.01


# ---------------------------------------------------------------------------
# text config files

_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "sample": SampleConfig}


def _coerce(cls, key: str, raw: Any):
    ftype = {f.name: f.type for f in fields(cls)}[key]
    if not isinstance(raw, str):
        return raw
    try:
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {ftype}") from None
    return raw


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines. ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def load_config_file(path: str | Path) -> dict[str, str]:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def resolve_configs(values: Mapping[str, Any]) -> tuple[ModelConfig, TrainConfig, SampleConfig]:
    """Build all three configs from flat key/value pairs.

    Keys may be bare field names (``hidden_dim``) or section-qualified
    (``train.seed``). A bare key that exists in several sections, such as
    ``seed``, is applied to each of them. ``preset`` selects the model
    base values.
    """
    per_section: dict[str, dict[str, Any]] = {s: {} for s in _SECTIONS}
    model_base: dict[str, Any] = {}
    for key, raw in values.items():
        if raw is None:
            continue
        if key in ("preset", "model.preset"):
            if raw not in _PRESETS:
                raise ConfigError(
                    f"unknown preset {raw!r}; valid presets: {', '.join(PRESET_NAMES)}")
            model_base = dict(_PRESETS[raw])
            continue
        if "." in key:
            section, name = key.split(".", 1)
            if section not in _SECTIONS or name not in _field_names(_SECTIONS[section]):
                raise ConfigError(f"unknown config key {key!r}")
            targets = [section]
        else:
            name = key
            targets = [s for s, cls in _SECTIONS.items() if name in _field_names(cls)]
            if not targets:
                raise ConfigError(f"unknown config key {key!r}")
        for section in targets:
            per_section[section][name] = _coerce(_SECTIONS[section], name, raw)
    try:
        model = ModelConfig(**{**model_base, **per_section["model"]})
        train = TrainConfig(**per_section["train"])
        sample = SampleConfig(**per_section["sample"])
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return model, train, sample


def _field_names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


def to_dict(cfg) -> dict[str, Any]:
    if dataclasses.is_dataclass(cfg):
        return dataclasses.asdict(cfg)
    return dict(cfg)


def config_hash(*cfgs) -> str:
    """Short stable digest of configs (dataclasses or JSON-able mappings)."""
    blob = json.dumps([to_dict(c) for c in cfgs], sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
