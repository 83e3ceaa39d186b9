"""Model/run configuration and the flat key=value config file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

__all__ = ["ConfigError", "ExperimentSpec", "ModelConfig", "config_to_dict", "load_config", "parse_config_text", "save_config"]


class ConfigError(ValueError):
    """Bad configuration file or field value."""


@dataclass
class ModelConfig:
    latent_channels: int = 4
    base_width: int = 32
    level_count: int = 2
    T: int = 50
    enable_sam: bool = True
    enable_paf: bool = True
    enable_arsm: bool = True
    freeze_ref: bool = False
    freeze_tar: bool = False
    freeze_adapter: bool = False
    alpha_per_channel: bool = True
    learning_rate: float = 1e-3
    batch_size: int = 8
    seed: int = 0

    def validate(self) -> "ModelConfig":
        if self.latent_channels < 1 or self.base_width < 1 or self.level_count < 1:
            raise ConfigError("latent_channels, base_width and level_count must be positive")
        if self.T < 1:
            raise ConfigError("T must be at least 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.base_width % 4:
            raise ConfigError("base_width must be divisible by 4 (attention head count)")
        return self


@dataclass
class ExperimentSpec:
    """Everything one subcommand run depends on; the seed pins all draws."""

    config: ModelConfig
    out_dir: str
    seed: int
    task: str = "copy-patch"
    sample_count: int = 16
    image_size: int = 32
    steps: int = 200


_FIELDS = {f.name: f for f in dataclasses.fields(ModelConfig)}


def _parse_value(name: str, raw: str):
    kind = _FIELDS[name].type
    raw = raw.strip()
    if kind == "bool":
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"config key {name}: expected a boolean, got {raw!r}")
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"config key {name}: cannot parse {raw!r} as {kind}") from None
    raise ConfigError(f"config key {name}: unsupported field type {kind}")


def parse_config_text(text: str) -> ModelConfig:
    """Parse flat ``key=value`` lines; blank lines and '#' comments allowed.

    Unknown keys are errors.
    """
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key: {key}")
        if key in values:
            raise ConfigError(f"duplicate config key: {key}")
        values[key] = _parse_value(key, raw)
    return ModelConfig(**values).validate()


def load_config(path) -> ModelConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def config_to_dict(cfg: ModelConfig) -> dict:
    return dataclasses.asdict(cfg)


def save_config(path, cfg: ModelConfig) -> None:
    lines = [f"{name} = {getattr(cfg, name)}" for name in _FIELDS]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
