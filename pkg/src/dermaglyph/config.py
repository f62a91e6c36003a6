"""Flat key-value configuration shared by the CLI subcommands.

The file format is one ``key = value`` pair per line with ``#`` comments.
Parsing is strict: unknown keys are rejected by name (a typo never falls
back to a default silently), and values must parse as the key's type.
Defaults reproduce the published protocol values: 224x224 inputs, 16px
patches, task-dependent embedding 512/256 with hidden 1024/512, 3 encoder
blocks, 4 heads, learning rate 3e-4, 10 epochs, 5 folds, quality
threshold 2, and an 80/20 participant split.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

__all__ = ["PipelineConfig", "ConfigError", "load_config", "apply_overrides"]


class ConfigError(Exception):
    """Unknown key, malformed line, or ill-typed value in a config file."""


@dataclass
class PipelineConfig:
    # general
    seed: int = 0
    threads: int = 0  # 0 = all available cores
    out_dir: str = "out"
    task: str = "control-ks"
    # synthetic cohort
    controls: int = 40
    ks: int = 25
    wss: int = 12
    image_size: int = 224
    base_freq: float = 0.1
    freq_delta: float = 0.015
    noise_sigma: float = 0.05
    whorl_control: int = 0
    whorl_ks: int = 1
    whorl_wss: int = 2
    # enhancement
    block_size: int = 16
    sigma_x: float = 4.0
    sigma_y: float = 4.0
    target_mean: float = 0.5
    target_var: float = 0.01
    var_threshold: float = 0.001
    # quality gate
    quality_threshold: int = 2
    # split
    test_fraction: float = 0.2
    n_folds: int = 5
    # model (embed_dim / ffn_hidden 0 means the task default: 512/1024
    # against controls, 256/512 for ks-wss)
    patch_size: int = 16
    embed_dim: int = 0
    n_layers: int = 3
    n_heads: int = 4
    ffn_hidden: int = 0
    # training
    lr: float = 3e-4
    epochs: int = 10
    batch_size: int = 32
    use_class_weights: bool = True


_FIELD_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def _parse_value(key: str, text: str, lineno: int, path) -> object:
    ftype = _FIELD_TYPES[key]
    text = text.strip()
    try:
        if ftype == "bool":
            lowered = text.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if ftype == "int":
            return int(text)
        if ftype == "float":
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"{path}: line {lineno}: bad value for {key}: {exc}") from None


def load_config(path: str | Path) -> PipelineConfig:
    """Parse a config file; every key must be a known PipelineConfig field."""
    path = Path(path)
    values: dict[str, object] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}: line {lineno}: expected 'key = value', got {raw.rstrip()!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in _FIELD_TYPES:
                raise ConfigError(f"{path}: line {lineno}: unknown config key {key!r}")
            if key in values:
                raise ConfigError(f"{path}: line {lineno}: duplicate config key {key!r}")
            values[key] = _parse_value(key, value, lineno, path)
    return PipelineConfig(**values)


def apply_overrides(cfg: PipelineConfig, overrides: dict[str, object]) -> PipelineConfig:
    """Return a copy with non-None overrides applied (CLI flags win)."""
    kwargs = {f.name: getattr(cfg, f.name) for f in fields(PipelineConfig)}
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in kwargs:
            raise ConfigError(f"unknown config key {key!r}")
        kwargs[key] = value
    return PipelineConfig(**kwargs)
