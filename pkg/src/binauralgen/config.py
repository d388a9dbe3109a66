"""One JSON run configuration bundling every component config.

Unknown sections or fields are rejected by name. Each CLI run writes an
effective-config snapshot next to its outputs; feeding that snapshot back
reproduces the run.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import FrameConfig
from .dsp import AudioConfig
from .inference import InferenceConfig
from .losses import LossWeights
from .models import NetConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Malformed run configuration; the message names the offending key."""


_SECTIONS = {
    "audio": AudioConfig,
    "net": NetConfig,
    "frames": FrameConfig,
    "train": TrainConfig,
    "weights": LossWeights,
    "inference": InferenceConfig,
}


def _build_section(name: str, cls, payload: dict):
    allowed = {f.name: f for f in fields(cls)}
    unknown = set(payload) - set(allowed)
    if unknown:
        raise ConfigError(
            f"unknown key '{name}.{sorted(unknown)[0]}' in configuration"
        )
    coerced = {}
    for key, value in payload.items():
        if isinstance(value, list):
            value = tuple(value)
        coerced[key] = value
    try:
        return cls(**coerced)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{name}' section: {exc}") from exc


@dataclass
class RunConfig:
    audio: AudioConfig = field(default_factory=AudioConfig)
    net: NetConfig = field(default_factory=NetConfig)
    frames: FrameConfig = field(default_factory=FrameConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    inference: InferenceConfig = field(default_factory=InferenceConfig)

    @classmethod
    def from_dict(cls, payload: dict) -> "RunConfig":
        unknown = set(payload) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown section '{sorted(unknown)[0]}' in configuration")
        sections = {}
        for name, section_cls in _SECTIONS.items():
            body = payload.get(name, {})
            if not isinstance(body, dict):
                raise ConfigError(f"section '{name}' must be an object")
            sections[name] = _build_section(name, section_cls, body)
        return cls(**sections)

    @classmethod
    def from_json(cls, path: Path | str) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            payload = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        # accept an effective-config snapshot as well as a raw config
        if "config" in payload and "command" in payload:
            payload = payload["config"]
        return cls.from_dict(payload)

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in _SECTIONS}

    def to_json(self, path: Path | str) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def with_overrides(self, overrides: list[str]) -> "RunConfig":
        """Apply 'section.key=value' overrides; values parse as JSON first."""
        payload = self.to_dict()
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override '{item}' is not of the form key=value")
            dotted, raw = item.split("=", 1)
            parts = dotted.split(".")
            if len(parts) != 2:
                raise ConfigError(
                    f"override key '{dotted}' must be 'section.field'"
                )
            section, key = parts
            if section not in _SECTIONS:
                raise ConfigError(f"unknown section '{section}' in override '{item}'")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            payload[section][key] = value
        return RunConfig.from_dict(payload)
