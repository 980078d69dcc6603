"""Run configuration: profiles, key = value files and command-line overrides.

Every knob lives in one of four sections (``data``, ``model``, ``loss``,
``train``) and is addressed as ``section.field``. Resolution order is
defaults < profile < config file < explicit overrides.
"""

from __future__ import annotations

import types
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .datagen import DataConfig
from .losses import LossConfig
from .model import ModelConfig
from .trainer import TrainConfig

SECTIONS = ("data", "model", "loss", "train")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def seed(self) -> int:
        return self.train.seed

    def with_seed(self, seed: int) -> "RunConfig":
        """One seed drives data generation, the teacher and training."""
        return replace(self, data=replace(self.data, seed=seed), train=replace(self.train, seed=seed))

    def flat(self) -> dict[str, object]:
        out = {}
        for section in SECTIONS:
            for f in fields(getattr(self, section)):
                out[f"{section}.{f.name}"] = getattr(getattr(self, section), f.name)
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.flat().items())

    def override(self, values: dict[str, object]) -> "RunConfig":
        """Apply ``section.field`` overrides; string values are parsed by field type."""
        grouped: dict[str, dict[str, object]] = {s: {} for s in SECTIONS}
        for key, raw in values.items():
            section, _, name = key.partition(".")
            if section not in grouped or not name:
                raise ConfigError(f"unknown config key {key!r}")
            target = getattr(self, section)
            types_ = {f.name: f for f in fields(target)}
            if name not in types_:
                raise ConfigError(f"unknown config key {key!r}")
            hint = typing.get_type_hints(type(target))[name]
            grouped[section][name] = parse_value(raw, hint, key) if isinstance(raw, str) else raw
        try:
            return RunConfig(**{s: replace(getattr(self, s), **grouped[s]) for s in SECTIONS})
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def parse_value(text: str, hint, key: str = "?"):
    text = text.strip()
    args = typing.get_args(hint)
    if typing.get_origin(hint) in (typing.Union, types.UnionType) and type(None) in args:
        if text.lower() in ("none", "null", ""):
            return None
        hint = next(a for a in args if a is not type(None))
    try:
        if hint is bool:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value {text!r} for {key}") from None
    return text


def read_config_file(path: str | Path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def _toy() -> RunConfig:
    return RunConfig(model=ModelConfig(light_width=32), train=TrainConfig(clip_norm=5.0))


def _full() -> RunConfig:
    return RunConfig(model=ModelConfig(light_width=32))


def _tiny() -> RunConfig:
    # small enough for unit tests and smoke runs
    return RunConfig(
        data=DataConfig(n_train=96, n_gallery=64, n_queries=40),
        model=ModelConfig(light_width=16, hidden_self=16, hidden_cross=32),
        train=TrainConfig(epochs=2, warmup_epochs=1, batch_size=16, clip_norm=5.0),
    )


PROFILES = {"toy": _toy, "full": _full, "tiny": _tiny}


def profile(name: str) -> RunConfig:
    try:
        return PROFILES[name]()
    except KeyError:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None


def resolve(profile_name: str = "toy", config_file: str | Path | None = None,
            overrides: dict[str, object] | None = None, seed: int | None = None) -> RunConfig:
    cfg = profile(profile_name)
    if config_file is not None:
        cfg = cfg.override(read_config_file(config_file))
    if overrides:
        cfg = cfg.override(overrides)
    if seed is not None:
        cfg = cfg.with_seed(seed)
    return cfg


def from_flat(values: dict[str, object]) -> RunConfig:
    """Inverse of :meth:`RunConfig.flat` (values may be strings or typed)."""
    return RunConfig().override(values)


__all__ = ["ConfigError", "PROFILES", "RunConfig", "format_value", "from_flat", "parse_value",
           "profile", "read_config_file", "resolve"]
