"""Flat ``key = value`` run-configuration files.

Keys carry a section prefix naming the dataclass they configure::

    # comment
    synth.suite = identifiability
    synth.seed = 3
    model.n_invariant = 5
    model.hidden = 128, 128
    train.epochs = 50
    bench.seeds = 0, 1, 2

Tuples are comma separated; ``none`` clears an optional field. Unknown
sections or keys are errors.
"""
from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .model import VARIANTS, ModelConfig
from .synthdata import SynthConfig, default_suite
from .training import TrainConfig


class ConfigError(ValueError):
    """Malformed, unknown or invalid configuration entry."""


@dataclass
class BenchConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    variants: tuple[str, ...] = VARIANTS
    probe_train_envs: tuple[str, ...] | None = None


# model.n_genes is taken from the data; synth.suite selects a named base config
SECTIONS = {
    "synth": (SynthConfig, set()),
    "model": (ModelConfig, {"n_genes"}),
    "train": (TrainConfig, set()),
    "bench": (BenchConfig, set()),
}
_EXTRA_SYNTH = {"suite"}


@dataclass
class RunConfig:
    synth: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    bench: dict = field(default_factory=dict)

    def synth_config(self, seed: int | None = None) -> SynthConfig:
        values = dict(self.synth)
        suite = values.pop("suite", None)
        if seed is not None:
            values["seed"] = seed
        try:
            if suite is None:
                return SynthConfig(**values)
            base = default_suite()
            if suite not in base:
                raise ConfigError(f"synth.suite: unknown suite {suite!r}; choose from {sorted(base)}")
            return dataclasses.replace(base[suite], **values)
        except (TypeError, ValueError, KeyError) as err:
            if isinstance(err, ConfigError):
                raise
            raise ConfigError(f"invalid synth configuration: {err}") from err

    def model_config(self, n_genes: int, variant: str | None = None) -> ModelConfig:
        values = dict(self.model)
        if variant is not None:
            values["variant"] = variant
        return _build(ModelConfig, "model", n_genes=n_genes, **values)

    def train_config(self, seed: int | None = None) -> TrainConfig:
        values = dict(self.train)
        if seed is not None:
            values["seed"] = seed
        return _build(TrainConfig, "train", **values)

    def bench_config(self) -> BenchConfig:
        cfg = _build(BenchConfig, "bench", **self.bench)
        bad = [v for v in cfg.variants if v not in VARIANTS]
        if bad:
            raise ConfigError(f"bench.variants: unknown variant {bad[0]!r}")
        return cfg


def _build(cls, section: str, **values):
    try:
        return cls(**values)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid {section} configuration: {err}") from err


def documented_keys() -> list[tuple[str, str]]:
    """``(key, default)`` for every accepted key, for ``--help``."""
    out = [("synth.suite", "none")]
    for section, (cls, skip) in SECTIONS.items():
        for f in dataclasses.fields(cls):
            if f.name in skip:
                continue
            default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
            out.append((f"{section}.{f.name}", _show(default)))
    return out


def _show(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    return str(v)


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    cfg = RunConfig()
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        seen.add(key)
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r} (sections: {', '.join(SECTIONS)})")
        cls, skip = SECTIONS[section]
        hints = typing.get_type_hints(cls)
        if section == "synth" and name in _EXTRA_SYNTH:
            hint = str
        elif name in hints and name not in skip:
            hint = hints[name]
        else:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            getattr(cfg, section)[name] = _coerce(value, hint)
        except ValueError as err:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {err}") from err
    return cfg


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {p}: {err.strerror or err}") from err
    return parse_config_text(text, str(p))


def _coerce(text: str, hint):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if text.lower() == "none":
            if type(None) in args:
                return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(text, inner[0])
    if origin is tuple:
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(p, args[0]) for p in parts)
        if len(parts) != len(args):
            raise ValueError(f"expected {len(args)} comma-separated values")
        return tuple(_coerce(p, a) for p, a in zip(parts, args))
    if hint is bool:
        if text.lower() in ("true", "yes", "1"):
            return True
        if text.lower() in ("false", "no", "0"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if hint is int:
        return int(text)
    if hint is float:
        return float(text)
    if hint is str:
        return text
    raise ValueError(f"unsupported field type {hint!r}")
