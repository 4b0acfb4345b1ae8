"""Engine configuration: a flat key-value file with an exhaustive schema.

Config files are plain text, one `key = value` per line, `#` comments
allowed. Every key must appear in the schema; unknown keys are rejected with
the offending key named. A `preset` line applies a named block of defaults
before the remaining overrides.
"""

from __future__ import annotations

import math
from typing import Any, Dict


class ConfigError(ValueError):
    """Schema violation; the message names the offending key."""


def _bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes", "on"):
        return True
    if s.lower() in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s}")


def _vec3(s: str) -> tuple:
    parts = [float(p) for p in s.replace(",", " ").split()]
    if len(parts) != 3:
        raise ValueError("expected three numbers")
    return tuple(parts)


# key -> (parser, default)
SCHEMA: Dict[str, tuple] = {
    "preset": (str, "smoke"),
    "seed": (int, 0),
    "threads": (int, 0),  # 0 = leave torch's default; overridden by GRAM_THREADS

    "dataset.kind": (str, "synthetic"),  # synthetic | directory
    "dataset.path": (str, ""),
    "dataset.primitive": (str, "mixed"),  # sphere | box | mixed
    "dataset.count": (int, 512),
    "dataset.resolution": (int, 32),

    "train.iterations": (int, 2000),
    "train.batch_size": (int, 8),
    "train.aggregation": (int, 1),
    "train.lr_generator": (float, 2e-5),
    "train.lr_discriminator": (float, 2e-4),
    "train.adam_beta1": (float, 0.0),
    "train.adam_beta2": (float, 0.9),
    "train.adam_eps": (float, 1e-8),
    "train.r1_weight": (float, 10.0),
    "train.pose_weight": (float, 1.0),
    "train.pose_regularization": (_bool, True),
    "train.checkpoint_interval": (int, 200),

    "model.surface_count": (int, 6),
    "model.field_width": (int, 32),
    "model.latent_dim": (int, 64),
    "model.mapping_width": (int, 64),
    "model.synthesis_width": (int, 32),
    "model.synthesis_blocks": (int, 3),
    "model.sample_count": (int, 32),
    "model.background_plane": (_bool, False),
    "model.init_center": (_vec3, (0.0, 0.0, -1.5)),
    "model.init_radius": (float, 1.0),
    "model.freq_base": (float, 30.0),
    "model.freq_scale": (float, 15.0),

    "camera.fov_deg": (float, 12.0),
    "camera.radius": (float, 2.0),
    "camera.resolution": (int, 32),

    "pose.kind": (str, "gaussian_frontal"),  # gaussian_frontal | uniform_hemisphere
    "pose.yaw_std": (float, 0.3),
    "pose.pitch_std": (float, 0.15),

    "disc.base_width": (int, 16),
    "disc.max_width": (int, 128),
}

# Named defaults. `smoke` is the desk-scale training preset; the *_like
# presets mirror the published full-scale settings for reference renders.
PRESETS: Dict[str, Dict[str, Any]] = {
    "smoke": {},
    "faces_like": {
        "model.surface_count": 24,
        "model.field_width": 128,
        "model.latent_dim": 256,
        "model.mapping_width": 256,
        "model.synthesis_width": 256,
        "model.synthesis_blocks": 8,
        "model.sample_count": 64,
        "model.background_plane": True,
        "camera.resolution": 256,
        "dataset.resolution": 256,
    },
    "cars_like": {
        "model.surface_count": 48,
        "model.field_width": 256,
        "model.latent_dim": 256,
        "model.mapping_width": 256,
        "model.synthesis_width": 256,
        "model.synthesis_blocks": 8,
        "model.sample_count": 64,
        "model.init_center": (0.0, 0.0, 0.0),
        "camera.resolution": 128,
        "dataset.resolution": 128,
        "pose.kind": "uniform_hemisphere",
    },
}

_VALIDATORS = {
    "train.iterations": lambda v: v >= 0,
    "train.batch_size": lambda v: v >= 1,
    "train.aggregation": lambda v: v >= 1,
    "train.lr_generator": lambda v: v > 0,
    "train.lr_discriminator": lambda v: v > 0,
    "train.r1_weight": lambda v: v >= 0,
    "model.surface_count": lambda v: v >= 1,
    "model.sample_count": lambda v: v >= 2,
    "model.latent_dim": lambda v: v >= 1,
    "camera.fov_deg": lambda v: 0 < v < 180,
    "camera.radius": lambda v: v > 0,
    "camera.resolution": lambda v: v >= 16 and (v & (v - 1)) == 0,
    "dataset.resolution": lambda v: v >= 16 and (v & (v - 1)) == 0,
    "pose.kind": lambda v: v in ("gaussian_frontal", "uniform_hemisphere"),
    "pose.yaw_std": lambda v: v > 0,
    "pose.pitch_std": lambda v: v > 0,
    "dataset.kind": lambda v: v in ("synthetic", "directory"),
    "dataset.primitive": lambda v: v in ("sphere", "box", "mixed"),
}


class EngineConfig:
    """Validated flat configuration with attribute-free dict access."""

    def __init__(self, values: Dict[str, Any]):
        self._values = values

    def __getitem__(self, key: str) -> Any:
        return self._values[key]

    def get(self, key: str, default=None) -> Any:
        return self._values.get(key, default)

    def as_dict(self) -> Dict[str, Any]:
        return dict(self._values)

    @property
    def fov(self) -> float:
        return math.radians(self["camera.fov_deg"])


def _validate(values: Dict[str, Any]) -> None:
    for key, check in _VALIDATORS.items():
        if not check(values[key]):
            raise ConfigError(f"invalid value for '{key}': {values[key]!r}")
    preset = values["preset"]
    if preset not in PRESETS:
        raise ConfigError(f"invalid value for 'preset': {preset!r}")


def from_entries(entries: Dict[str, str]) -> EngineConfig:
    """Build a config from raw string entries (file lines or CLI overrides)."""
    for key in entries:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key: '{key}'")
    values = {k: default for k, (_, default) in SCHEMA.items()}
    preset = entries.get("preset", values["preset"])
    if preset not in PRESETS:
        raise ConfigError(f"invalid value for 'preset': {preset!r}")
    values["preset"] = preset
    values.update(PRESETS[preset])
    for key, raw in entries.items():
        if key == "preset":
            continue
        parser = SCHEMA[key][0]
        try:
            values[key] = parser(raw) if isinstance(raw, str) else raw
        except ValueError as e:
            raise ConfigError(f"invalid value for '{key}': {raw!r} ({e})")
    _validate(values)
    return EngineConfig(values)


def parse_config_text(text: str) -> EngineConfig:
    entries: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = stripped.split("=", 1)
        entries[key.strip()] = value.strip()
    return from_entries(entries)


def load_config(path) -> EngineConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config_text(f.read())


def default_config() -> EngineConfig:
    return from_entries({})
