"""Flat ``key = value`` run configuration files.

Keys are namespaced by section: ``gen.*`` (scene generator), ``model.*``
(encoder and decoder sizes plus ``model.dtype``), ``train.*``, ``rl.*`` and
``decode.strategy``. Blank lines and ``#`` comments are ignored. Unknown keys
are errors, so typos never pass silently.
"""
from __future__ import annotations

import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .decoding import DecodeConfig
from .grpo import RLConfig
from .model import DecoderConfig, EncoderConfig, ModelConfig
from .scenegen import GenConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    gen: GenConfig = field(default_factory=GenConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    rl: RLConfig = field(default_factory=RLConfig)
    strategy: str = "greedy"


_SCALARS = (int, float, str, bool)


def _settable(cls) -> dict[str, type]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls) if hints[f.name] in _SCALARS}


def _convert(key: str, raw: str, typ: type, lineno: int):
    try:
        if typ is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError:
        raise ConfigError(f"line {lineno}: {key} expects {typ.__name__}, got {raw!r}") from None


def parse_pairs(text: str) -> list[tuple[int, str, str]]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        out.append((lineno, key.strip(), value.strip()))
    return out


_SECTIONS = {
    "gen": GenConfig,
    "train": TrainConfig,
    "rl": RLConfig,
    "encoder": EncoderConfig,
    "decoder": DecoderConfig,
}


def _model_key(name: str) -> str | None:
    if name == "dtype":
        return "model"
    if name in _settable(EncoderConfig):
        return "encoder"
    if name in _settable(DecoderConfig):
        return "decoder"
    return None


def apply(cfg: RunConfig, pairs) -> RunConfig:
    updates: dict[str, dict] = {k: {} for k in ("gen", "train", "rl", "encoder", "decoder", "model", "run")}
    for lineno, key, raw in pairs:
        section, _, name = key.partition(".")
        if section == "model":
            target = _model_key(name)
            if target is None:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            typ = str if target == "model" else _settable(_SECTIONS[target])[name]
        elif section in ("gen", "train", "rl"):
            known = _settable(_SECTIONS[section])
            if name not in known:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            target, typ = section, known[name]
        elif key == "decode.strategy":
            target, name, typ = "run", "strategy", str
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        updates[target][name] = _convert(key, raw, typ, lineno)
    if "strategy" in updates["run"]:
        try:
            DecodeConfig.parse(updates["run"]["strategy"])
        except ValueError as e:
            raise ConfigError(f"decode.strategy: {e}") from None
    try:
        model = cfg.model
        if updates["encoder"] or updates["decoder"] or updates["model"]:
            model = ModelConfig(
                replace(model.encoder, **updates["encoder"]),
                replace(model.decoder, **updates["decoder"]),
                **{"dtype": model.dtype, **updates["model"]},
            )
        return replace(
            cfg,
            gen=replace(cfg.gen, **updates["gen"]),
            model=model,
            train=replace(cfg.train, **updates["train"]),
            rl=replace(cfg.rl, **updates["rl"]),
            **updates["run"],
        )
    except (ValueError, TypeError) as e:
        raise ConfigError(f"invalid configuration: {e}") from None


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    """Read a config file (or defaults when ``path`` is None) and apply ``key=value`` overrides."""
    cfg = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="ascii")
        except UnicodeDecodeError:
            raise ConfigError(f"{path}: config files must be ASCII") from None
        cfg = apply(cfg, parse_pairs(text))
    if overrides:
        cfg = apply(cfg, parse_pairs("\n".join(overrides)))
    return cfg


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for section, obj in (("gen", cfg.gen), ("train", cfg.train), ("rl", cfg.rl)):
        for name in _settable(type(obj)):
            lines.append(f"{section}.{name} = {getattr(obj, name)}")
    for obj in (cfg.model.encoder, cfg.model.decoder):
        for name in _settable(type(obj)):
            lines.append(f"model.{name} = {getattr(obj, name)}")
    lines.append(f"model.dtype = {cfg.model.dtype}")
    lines.append(f"decode.strategy = {cfg.strategy}")
    return "\n".join(lines) + "\n"


