"""Run configuration: INI file plus command-line overrides.

Every tunable lives in one flat dataclass. Files use bracketed sections
with ``key = value`` lines; unknown sections or keys are rejected so a
typo cannot silently fall back to a default. Each command prints the
fully resolved configuration, making runs self-describing.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields

from .errors import ConfigError


@dataclass
class RunConfig:
    # run
    seed: int = 0
    out_dir: str = "runs"
    # model
    in_channels: int = 1
    keypoints: int = 8
    image_size: int = 32
    # scenes
    scene_count: int = 64
    depth_bin: str = "near"
    noise_px: float = 0.0
    # quant
    bits: int = 8
    mode: str = "III"
    # distill
    steps: int = 200
    lr: float = 1e-3
    momentum: float = 0.9
    held_out: int = 16
    # pim
    units: int = 64
    macs_per_unit_per_cycle: int = 32
    clock_hz: float = 100e6
    observed_ms: float = 5.99


# (section, key in file) -> dataclass attribute
SCHEMA = {
    ("run", "seed"): "seed",
    ("run", "out_dir"): "out_dir",
    ("model", "in_channels"): "in_channels",
    ("model", "keypoints"): "keypoints",
    ("model", "image_size"): "image_size",
    ("scenes", "count"): "scene_count",
    ("scenes", "bin"): "depth_bin",
    ("scenes", "noise_px"): "noise_px",
    ("quant", "bits"): "bits",
    ("quant", "mode"): "mode",
    ("distill", "steps"): "steps",
    ("distill", "lr"): "lr",
    ("distill", "momentum"): "momentum",
    ("distill", "held_out"): "held_out",
    ("pim", "units"): "units",
    ("pim", "macs_per_unit_per_cycle"): "macs_per_unit_per_cycle",
    ("pim", "clock_hz"): "clock_hz",
    ("pim", "observed_ms"): "observed_ms",
}

_ATTR_SECTION = {attr: sec_key for sec_key, attr in SCHEMA.items()}


def _coerce(attr: str, raw: str, cfg: RunConfig):
    current = getattr(cfg, attr)
    try:
        if isinstance(current, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        return type(current)(raw)
    except ValueError as e:
        raise ConfigError(f"bad value for {attr}: {raw!r} ({e})") from None


def load_config(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file not found: {path}")
        for section in parser.sections():
            for key, raw in parser.items(section):
                attr = SCHEMA.get((section, key))
                if attr is None:
                    raise ConfigError(f"unknown config key [{section}] {key}")
                setattr(cfg, attr, _coerce(attr, raw, cfg))
    for attr, value in (overrides or {}).items():
        if value is None:
            continue
        if attr not in _ATTR_SECTION:
            raise ConfigError(f"unknown override {attr!r}")
        setattr(cfg, attr, value)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig):
    if cfg.mode not in ("I", "II", "III"):
        raise ConfigError(f"mode must be I, II, or III, got {cfg.mode!r}")
    if cfg.depth_bin not in ("near", "medium", "far"):
        raise ConfigError(f"bin must be near, medium, or far, got {cfg.depth_bin!r}")
    if cfg.keypoints not in (8, 11):
        raise ConfigError(f"keypoints must be 8 or 11, got {cfg.keypoints}")
    for attr in ("image_size", "scene_count", "steps", "units",
                 "macs_per_unit_per_cycle", "held_out"):
        if getattr(cfg, attr) < 0 or (attr == "image_size" and cfg.image_size < 8):
            raise ConfigError(f"{attr} out of range: {getattr(cfg, attr)}")
    if cfg.image_size % 8:
        raise ConfigError("image_size must be a multiple of 8 (three stride-2 stages)")


def resolved_text(cfg: RunConfig) -> str:
    """INI-style dump of every setting, for run headers and logs."""
    by_section: dict[str, list[str]] = {}
    for f in fields(cfg):
        section, key = _ATTR_SECTION[f.name]
        by_section.setdefault(section, []).append(f"{key} = {getattr(cfg, f.name)}")
    chunks = []
    for section in ("run", "model", "scenes", "quant", "distill", "pim"):
        chunks.append(f"[{section}]")
        chunks.extend(by_section.get(section, []))
    return "\n".join(chunks)
