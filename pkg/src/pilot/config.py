"""Run configuration: an INI-style key/value file with one section per component.

Sections and keys::

    [model]     num_sources feature_dim conv_filters fc_hidden layers heads ff_dim dtype
    [loss]      alpha beta conventional_great_circle
    [train]     batch_size base_lr epochs warmup_steps weight_decay grad_clip seed
    [scene]     duration max_overlap num_events min_event_s max_event_s
                azimuth_range elevation_range snr_db sample_rate seed
    [data]      num_scenes num_folds validation_fraction folds eval_batch_size

Tuple values are comma separated. Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path

from .model import ModelConfig
from .objective import LossConfig
from .simulator import SceneSpec
from .trainer import TrainConfig


class ConfigError(ValueError):
    """A configuration file or override is malformed."""


@dataclass(frozen=True)
class DataConfig:
    num_scenes: int = 12
    num_folds: int = 3
    validation_fraction: float = 0.2
    folds: tuple[int, ...] = ()  # empty means every fold
    eval_batch_size: int = 32


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    scene: SceneSpec = field(default_factory=SceneSpec)
    data: DataConfig = field(default_factory=DataConfig)

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, train=dataclasses.replace(self.train, seed=seed),
                                   scene=dataclasses.replace(self.scene, seed=seed))

    def with_conventional_great_circle(self) -> "RunConfig":
        return dataclasses.replace(self, loss=dataclasses.replace(self.loss, conventional_great_circle=True))

    def to_text(self) -> str:
        parser = configparser.ConfigParser()
        for section in SECTIONS:
            obj = getattr(self, section)
            parser[section] = {f.name: _format(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()


SECTIONS = ("model", "loss", "train", "scene", "data")


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(repr(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            kind = type(default[0]) if default else int
            return tuple(kind(s) for s in items)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    base = RunConfig()
    parts = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]")
    for section in SECTIONS:
        obj = getattr(base, section)
        known = {f.name for f in dataclasses.fields(obj)}
        values = {}
        if parser.has_section(section):
            for key, raw in parser.items(section, raw=True):
                if key not in known:
                    raise ConfigError(f"{source}: unknown key {section}.{key}")
                values[key] = _parse(raw, getattr(obj, key), f"{source}: {section}.{key}")
        try:
            parts[section] = dataclasses.replace(obj, **values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{source}: [{section}] {exc}") from exc
    return RunConfig(**parts)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text, str(path))
