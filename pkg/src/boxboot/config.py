"""Flat ``key = value`` config files covering TrainConfig, SceneConfig and dataset keys."""

from __future__ import annotations

import dataclasses
import enum
from pathlib import Path

from boxboot.synthdata import SceneConfig
from boxboot.trainer import TrainConfig


class ConfigError(ValueError):
    pass


# keys that belong to neither dataclass
EXTRA_KEYS = {"pp_ratio": 0.18, "objects_per_image": "1..3"}


def _coerce(raw: str, default):
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, enum.Enum):
        return type(default)(raw)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def _defaults(cls) -> dict:
    return {f.name: f.default for f in dataclasses.fields(cls)}


def parse_config(text: str, source: str = "<config>") -> tuple[TrainConfig, SceneConfig, float]:
    """Return ``(train_cfg, scene_cfg, pp_ratio)``; unknown keys are an error.

    ``seed`` feeds both the trainer and the scene generator.
    """
    train_defaults = _defaults(TrainConfig)
    scene_defaults = _defaults(SceneConfig)
    known = {**scene_defaults, **train_defaults, **EXTRA_KEYS}
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown key '{key}'")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key '{key}'")
        try:
            values[key] = _coerce(raw, known[key])
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for '{key}': {exc}") from None

    if "objects_per_image" in values:
        lo, sep, hi = str(values.pop("objects_per_image")).partition("..")
        try:
            values["objects_min"], values["objects_max"] = int(lo), int(hi if sep else lo)
        except ValueError:
            raise ConfigError(f"{source}: objects_per_image must look like '1..3'") from None
    pp_ratio = float(values.pop("pp_ratio", EXTRA_KEYS["pp_ratio"]))
    if not 0 <= pp_ratio <= 1:
        raise ConfigError(f"{source}: pp_ratio must lie in [0, 1], got {pp_ratio}")
    try:
        train_cfg = TrainConfig(**{k: v for k, v in values.items() if k in train_defaults})
        scene_cfg = SceneConfig(**{k: v for k, v in values.items() if k in scene_defaults})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return train_cfg, scene_cfg, pp_ratio


def load_config(path) -> tuple[TrainConfig, SceneConfig, float]:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    return parse_config(text, str(p))
