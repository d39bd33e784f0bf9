"""Flat ``key = value`` run configuration files.

Every key maps onto a :class:`~cife.training.TrainConfig`, sampler or
dataset field. Unknown keys are an error; the fully resolved config is
written next to every run's outputs.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from .training import TrainConfig

SEED_ENV = "CIFE_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class SamplerSettings:
    steps: int = 20
    eta: float = 0.0


@dataclass
class DatasetSettings:
    characters: int = 8
    c_per: int = 2
    f_per: int = 16
    data_seed: int = 1


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerSettings = field(default_factory=SamplerSettings)
    dataset: DatasetSettings = field(default_factory=DatasetSettings)

    def sections(self):
        return (self.train, self.sampler, self.dataset)

    def keys(self) -> list[str]:
        return [f.name for s in self.sections() for f in fields(s)]

    def get(self, key: str):
        for s in self.sections():
            if key in {f.name for f in fields(s)}:
                return getattr(s, key)
        raise ConfigError(f"unknown config key {key!r}")

    def update(self, values: dict) -> "RunConfig":
        """Return a new config with ``values`` applied (types coerced from the defaults)."""
        per_section = [dict() for _ in self.sections()]
        for key, raw in values.items():
            for i, s in enumerate(self.sections()):
                names = {f.name: f for f in fields(s)}
                if key in names:
                    per_section[i][key] = _coerce(raw, type(getattr(s, key)), key)
                    break
            else:
                raise ConfigError(f"unknown config key {key!r}")
        built = []
        for s, upd in zip(self.sections(), per_section):
            current = {f.name: getattr(s, f.name) for f in fields(s)}
            current.update(upd)
            try:
                built.append(type(s)(**current))
            except ValueError as e:
                raise ConfigError(str(e)) from e
        return RunConfig(*built)

    def dumps(self) -> str:
        lines = []
        for s in self.sections():
            lines.append(f"# {type(s).__name__}")
            lines.extend(f"{f.name} = {_format(getattr(s, f.name))}" for f in fields(s))
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps(), encoding="utf-8")


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(raw, kind, key):
    if not isinstance(raw, str):
        return kind(raw)
    text = raw.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text, 0)
        return kind(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        values[key] = value
    return values


def env_seed() -> Optional[int]:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw.strip() == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def load_config(path=None, base: Optional[RunConfig] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Defaults <- ``CIFE_SEED`` <- config file <- explicit overrides (flags win)."""
    cfg = base or RunConfig()
    seed = env_seed()
    if seed is not None:
        cfg = cfg.update({"seed": seed})
    if path is not None:
        cfg = cfg.update(parse_config_text(Path(path).read_text(encoding="utf-8")))
    if overrides:
        cfg = cfg.update({k: v for k, v in overrides.items() if v is not None})
    return cfg
