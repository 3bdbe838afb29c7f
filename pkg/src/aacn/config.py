"""Run configuration: one flat file (JSON or key=value lines) plus flag overrides."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields
from typing import Any, Mapping, Optional

from .attention_gt import GtConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Every knob the CLI exposes, with its default.

    Grid and image sizes are ``height x width``; the default 96x48 image is
    rasterized on a 48x24 feature grid (stride 2). ``ppa_grid`` is the coarser
    grid the part attention network runs on.
    """

    image_h: int = 96
    image_w: int = 48
    grid_h: int = 48
    grid_w: int = 24
    ppa_grid_h: int = 24
    ppa_grid_w: int = 12
    sigma_band: Optional[float] = None
    sigma_gauss: Optional[float] = None
    channels: int = 256
    mu1: float = 1.0
    mu2: float = 1.0
    lr: float = 0.05
    epochs: int = 200
    seed: int = 0
    metric: str = "euclidean"
    mode: str = "single"
    attention_source: str = "gt"
    margin: float = 1.0
    occluded_attention: float = 0.1
    cross_camera: bool = True
    threads: int = 1

    _choices = {
        "metric": ("euclidean", "cosine"),
        "mode": ("single", "multi"),
        "attention_source": ("gt", "ppa", "file"),
    }

    def gt_config(self) -> GtConfig:
        return GtConfig(self.grid_w, self.grid_h, self.image_w, self.image_h,
                        self.sigma_band, self.sigma_gauss)

    def ppa_gt_config(self) -> GtConfig:
        return GtConfig(self.ppa_grid_w, self.ppa_grid_h, self.image_w, self.image_h,
                        self.sigma_band, self.sigma_gauss)

    def validate(self) -> "RunConfig":
        for key, allowed in self._choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key}: {getattr(self, key)!r} not in {allowed}")
        for key in ("image_h", "image_w", "grid_h", "grid_w", "ppa_grid_h", "ppa_grid_w",
                    "channels", "threads"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key}: must be positive")
        for key in ("mu1", "mu2", "lr", "margin"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key}: must be non-negative")
        if self.epochs < 0:
            raise ConfigError("epochs: must be non-negative")
        if not 0.0 <= self.occluded_attention < 1.0:
            raise ConfigError("occluded_attention: must lie in [0, 1)")
        try:
            self.gt_config()
            self.ppa_gt_config()
        except ValueError as exc:
            raise ConfigError(f"grid: {exc}") from exc
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key: str, value: Any):
    default = getattr(RunConfig, key)
    ftype = _FIELDS[key].type
    if value is None or (isinstance(value, str) and value.lower() in ("none", "null", "")):
        if "Optional" in str(ftype):
            return None
        raise ConfigError(f"{key}: value required")
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() in ("1", "true", "yes", "on"):
                    return True
                if value.lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float) or "float" in str(ftype):
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r}") from None


def parse_config_text(text: str) -> dict:
    """Parse JSON or ``key=value`` lines (``#`` comments allowed) into a raw dict."""
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            data = json.loads(stripped)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: invalid JSON ({exc})") from exc
        return dict(data)
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def build_config(raw: Optional[Mapping[str, Any]] = None, **overrides) -> RunConfig:
    """Merge a raw mapping and overrides (overrides win) into a validated config."""
    merged = dict(raw or {})
    merged.update({k: v for k, v in overrides.items() if v is not None})
    values = {}
    for key, value in merged.items():
        if key not in _FIELDS or key.startswith("_"):
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, value)
    return RunConfig(**values).validate()


def load_config(path=None, **overrides) -> RunConfig:
    raw = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            raw = parse_config_text(fh.read())
    return build_config(raw, **overrides)
