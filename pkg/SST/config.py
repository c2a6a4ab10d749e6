"""
The global configuration file.

One TOML document with a table per concern. Each table maps onto one
frozen dataclass owned by the module that uses it, so the defaults live
next to the code and `settings.toml` only documents them.

Usage:
    >>> config = load_config()                 # the packaged defaults
    >>> config = apply_preset(config, "tiny")
    >>> save_config(config, "my-settings.toml")

Unknown tables and keys are rejected with a `ConfigError` that names the
offending key; missing keys take their module default.
"""

import tomllib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Final, Mapping

import tomlkit

from SST.audible import GridConfig
from SST.audio import StftConfig
from SST.errors import ConfigError
from SST.inaudible import ChirpConfig
from SST.network import AoAHeadConfig, EmbeddingConfig, ModelConfig, SeparatorConfig
from SST.presets import get_preset
from SST.realtime import RealtimeConfig
from SST.simulate import (
    DEFAULT_DEVICE_ORIGIN,
    DEFAULT_MIC_OFFSETS,
    ArrayGeometry,
    RoomSpec,
)
from SST.training import DatasetConfig, TrainConfig

DEFAULT_CONFIG_PATH: Final[Path] = Path(__file__).with_name("settings.toml")


@dataclass(frozen=True)
class GeometryConfig:
    """A linear array: offsets along `axis` from `origin`, in metres."""

    mic_offsets: tuple[float, ...] = DEFAULT_MIC_OFFSETS
    origin: tuple[float, ...] = DEFAULT_DEVICE_ORIGIN
    axis: tuple[float, ...] = (1.0, 0.0, 0.0)
    reference_index: int = 0

    def __post_init__(self):
        for name in ("mic_offsets", "origin", "axis"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if len(self.origin) != 3 or len(self.axis) != 3:
            raise ConfigError("geometry.origin and geometry.axis must be 3D")
        if not any(self.axis):
            raise ConfigError("geometry.axis must not be the zero vector")

    def array(self) -> ArrayGeometry:
        linear = ArrayGeometry.linear(self.mic_offsets, self.origin, self.axis)
        return replace(linear, reference_index=self.reference_index)


@dataclass(frozen=True)
class SeedConfig:
    simulate: int = 0
    dataset: int = 1
    train: int = 2
    init: int = 3

    def with_base(self, seed: int) -> "SeedConfig":
        """Offset every seed by a single `--seed` value."""
        return SeedConfig(*(seed * 1000 + getattr(self, f.name) for f in fields(self)))


@dataclass(frozen=True)
class GlobalConfig:
    stft: StftConfig = field(default_factory=StftConfig)
    chirp: ChirpConfig = field(default_factory=ChirpConfig)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    room: RoomSpec = field(default_factory=RoomSpec)
    separator: SeparatorConfig = field(default_factory=SeparatorConfig)
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    aoa_head: AoAHeadConfig = field(default_factory=AoAHeadConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    grids: GridConfig = field(default_factory=GridConfig)
    realtime: RealtimeConfig = field(default_factory=RealtimeConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(self.embedding, self.aoa_head, self.separator)

    @property
    def array(self) -> ArrayGeometry:
        return self.geometry.array()


SECTIONS: Final[dict[str, Any]] = {f.name: f.type for f in fields(GlobalConfig)}

SECTION_NOTES: Final[dict[str, str]] = {
    "stft": "16 kHz speech-band STFT (hop and window in seconds)",
    "chirp": "FMCW chirp played by the device speakers",
    "geometry": "linear microphone array (metres, room coordinates)",
    "room": "shoebox room of the simulator",
    "separator": "TCN mask estimator; conditioning = lps | aoa | embedding",
    "embedding": "profile embedding networks (one per sensing stream)",
    "aoa_head": "LSTM + dense azimuth head",
    "train": "optimizer, schedule and early stopping",
    "dataset": "synthetic mixture generation",
    "grids": "profile axes and MUSIC parameters",
    "realtime": "streaming engine cadence and latency budget",
    "seeds": "per-stage random seeds",
}


def _coerce(default: Any, value: Any, where: str) -> Any:
    match default:
        case bool():
            if not isinstance(value, bool):
                raise ConfigError(f"{where} must be true or false")
            return value
        case int():
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{where} must be an integer")
            return value
        case float():
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where} must be a number")
            return float(value)
        case str():
            if not isinstance(value, str):
                raise ConfigError(f"{where} must be a string")
            return value
        case tuple():
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{where} must be an array")
            sample = default[0] if default else value[0] if value else 0.0
            items = enumerate(value)
            return tuple(_coerce(sample, v, f"{where}[{i}]") for i, v in items)
        case _:
            return value


def _section(name: str, table: Any) -> Any:
    kind = SECTIONS[name]
    if not isinstance(table, Mapping):
        raise ConfigError(f"[{name}] must be a table")
    defaults = kind()
    known = {f.name for f in fields(kind)}
    values = {}
    for key, value in table.items():
        if key not in known:
            raise ConfigError(f"unknown configuration key '{name}.{key}'")
        values[key] = _coerce(getattr(defaults, key), value, f"{name}.{key}")
    return kind(**values)


def parse_config(data: Mapping[str, Any]) -> GlobalConfig:
    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown configuration section '{unknown[0]}'")
    return GlobalConfig(**{name: _section(name, table) for name, table in data.items()})


def load_config(path: str | Path | None = None) -> GlobalConfig:
    """
    Read a configuration file; None reads the packaged defaults.

    Raises
    ------
    ConfigError
        The file is missing, is not valid TOML, or names unknown keys.
    """
    path = DEFAULT_CONFIG_PATH if path is None else Path(path)
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except FileNotFoundError as err:
        raise ConfigError(f"configuration file {path} not found") from err
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"{path}: {err}") from err
    return parse_config(data)


def _toml_value(value: Any) -> Any:
    if isinstance(value, tuple):
        return [_toml_value(v) for v in value]
    return value


def config_document(config: GlobalConfig) -> tomlkit.TOMLDocument:
    doc = tomlkit.document()
    doc.add(tomlkit.comment("SST configuration"))
    for name in SECTIONS:
        section = getattr(config, name)
        table = tomlkit.table()
        table.comment(SECTION_NOTES[name])
        for f in fields(section):
            table.add(f.name, _toml_value(getattr(section, f.name)))
        doc.add(tomlkit.nl())
        doc.add(name, table)
    return doc


def save_config(config: GlobalConfig, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as f:
        tomlkit.dump(config_document(config), f)
    return path


def apply_preset(config: GlobalConfig, name: str) -> GlobalConfig:
    """
    Replace the network sizes with those of preset `name`. The
    conditioning, pre-mask mode and stream switches of `config` stay.
    """
    preset = get_preset(name)
    separator = replace(
        preset.separator(),
        conditioning=config.separator.conditioning,
        premask_mode=config.separator.premask_mode,
    )
    embedding = replace(
        preset.embedding(),
        use_audible=config.embedding.use_audible,
        use_inaudible=config.embedding.use_inaudible,
    )
    return replace(
        config, separator=separator, embedding=embedding, aoa_head=preset.aoa_head()
    )
