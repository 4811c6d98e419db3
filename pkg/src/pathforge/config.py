"""Plain-text pipeline configuration.

Grammar::

    # comment
    [section]
    key = value

Sections and keys are fixed (see ``SCHEMA``); anything unknown is an error
reported with its line number. ``none`` clears an optional value. Tuples are
comma separated.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Callable

from .errors import InvalidConfigError


class ConfigError(InvalidConfigError):
    category = "config"

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        where = f"{path or '<config>'}:{line}: " if line else (f"{path}: " if path else "")
        super().__init__(where + message)
        self.line = line


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional(conv: Callable[[str], Any]) -> Callable[[str], Any]:
    def parse(text: str):
        return None if text.lower() == "none" else conv(text)

    return parse


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(","))


def _int(text: str) -> int:
    return int(text.replace("_", ""))


SCHEMA: dict[str, dict[str, Callable[[str], Any]]] = {
    "tiling": {
        "tile_px": _int,
        "target_mpp": float,
        "min_tissue_frac": float,
        "threshold_mode": str,
        "saturation_threshold": float,
        "mask_downsample": _optional(_int),
        "jpeg_quality": _int,
    },
    "schedule": {
        "tiles_per_epoch": _int,
        "n_pseudo_epochs": _int,
        "n_folds": _int,
        "imagenet_size": _int,
        "replacement_cap": _optional(float),
        "effective_batch": _int,
    },
    "train": {
        "epochs": _int,
        "base_lr": float,
        "final_lr": float,
        "warmup_start_lr": float,
        "base_wd": float,
        "final_wd": float,
        "warmup_epochs": _int,
        "betas": _floats,
        "eps": float,
        "hidden": _int,
        "max_tiles_per_bag": _optional(_int),
    },
    "plan": {
        "n_splits": _int,
        "train_frac": float,
        "replicas": _int,
        "stratified": _bool,
        "bootstrap_iters": _int,
        "ci_level": float,
    },
    "synth_slide": {
        "slide_id": str,
        "organ": str,
        "width": _int,
        "height": _int,
        "mpp": float,
        "coverage": float,
        "n_blobs": _int,
        "noise": _int,
    },
    "synth_embed": {
        "n_slides": _int,
        "min_tiles": _int,
        "max_tiles": _int,
        "dim": _int,
        "signal_frac": float,
        "effect_size": float,
        "checkpoint_tag": str,
        "shuffle_labels": _bool,
    },
    "run": {
        "seed": _int,
        "jobs": _optional(_int),
        "out": _optional(str),
    },
}


@dataclass
class PipelineConfig:
    """Parsed sections; each maps key -> typed value for keys that were set."""

    sections: dict[str, dict[str, Any]] = field(default_factory=lambda: {s: {} for s in SCHEMA})
    source: str | None = None

    def section(self, name: str) -> dict[str, Any]:
        return self.sections[name]

    def get(self, section: str, key: str, default: Any = None) -> Any:
        return self.sections[section].get(key, default)

    def set(self, section: str, key: str, value: Any) -> None:
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        self.sections[section][key] = value

    def render(self) -> str:
        """Canonical text form; parsing it back yields an equal config."""
        out = []
        for name in SCHEMA:
            values = self.sections[name]
            if not values:
                continue
            out.append(f"[{name}]")
            for key in sorted(values):
                out.append(f"{key} = {_format(values[key])}")
            out.append("")
        return "\n".join(out)


def _format(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str, path: str | None = None) -> PipelineConfig:
    cfg = PipelineConfig(source=path)
    section: str | None = None
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {raw.strip()!r}", path, n)
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]", path, n)
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", path, n)
        if section is None:
            raise ConfigError(f"key {key!r} outside of any section", path, n)
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {key!r} in section [{section}]", path, n)
        if key in cfg.sections[section]:
            raise ConfigError(f"duplicate key {key!r} in section [{section}]", path, n)
        try:
            cfg.sections[section][key] = SCHEMA[section][key](value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {section}.{key}: {exc}", path, n) from None
    return cfg


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), str(path))


def build(cls, values: dict[str, Any], **overrides):
    """Instantiate dataclass ``cls`` from config values, ignoring keys it does not take."""
    names = {f.name for f in fields(cls)}
    kwargs = {k: v for k, v in values.items() if k in names}
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**kwargs)
