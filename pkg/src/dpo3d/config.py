"""INI run configuration: sections map onto the generator, shift, pretraining,
stream and adaptation settings. Unknown sections or keys are rejected."""
from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Optional

from .detector import TrainConfig
from .loop import AdaptConfig
from .scene_gen import SHIFT_PRESETS, GenConfig, ShiftSpec


class ConfigError(ValueError):
    """Invalid, unknown or missing configuration entry."""


@dataclass(frozen=True)
class RunConfig:
    name: str
    seed: int
    seeds: tuple = (0, 1, 2)
    gen: GenConfig = GenConfig()
    shift: ShiftSpec = SHIFT_PRESETS["composite-heavy"]
    shift_name: str = "composite-heavy"
    train: TrainConfig = TrainConfig()
    n_train: int = 160
    n_source_eval: int = 40
    n_batches: int = 40
    batch_size: int = 8
    adapt: AdaptConfig = AdaptConfig()
    out: str = "runs"


REQUIRED = {"run": ("name", "seed")}


def _pair(text: str) -> tuple:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2:
        raise ValueError(f"expected 'lo, hi', got {text!r}")
    return (float(parts[0]), float(parts[1]))


def _ints(text: str) -> tuple:
    return tuple(int(p) for p in text.replace(",", " ").split())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text: str) -> Optional[float]:
    return None if text.strip().lower() in ("", "none") else float(text)


def _parser_for(ftype: str):
    if ftype in ("int",):
        return int
    if ftype in ("float",):
        return float
    if ftype in ("bool",):
        return _bool
    if ftype in ("tuple",):
        return _pair
    if ftype.startswith("Optional[float]"):
        return _opt_float
    return str


def _dataclass_keys(cls, skip=()) -> dict:
    return {f.name: _parser_for(str(f.type)) for f in fields(cls) if f.name not in skip}


SCHEMA = {
    "run": {"name": str, "seed": int, "seeds": _ints, "out": str},
    "grid": {"height": int, "width": int, "channels": int, "cell_size": float},
    "generator": _dataclass_keys(GenConfig, skip=("height", "width", "channels", "cell_size")),
    "shift": {"preset": str, **_dataclass_keys(ShiftSpec)},
    "pretrain": {"n_scenes": int, "n_eval": int, **_dataclass_keys(TrainConfig, skip=("seed",))},
    "stream": {"n_batches": int, "batch_size": int},
    "adapt": _dataclass_keys(AdaptConfig),
}


def _typed(section: str, key: str, raw: str):
    try:
        conv = SCHEMA[section][key]
    except KeyError:
        raise ConfigError(f"unknown key [{section}] {key}") from None
    try:
        return conv(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from None


def parse(text: str, source: str = "<string>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    values: dict = {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        values[section] = {k: _typed(section, k, v) for k, v in cp.items(section)}
    for section, keys in REQUIRED.items():
        for key in keys:
            if key not in values.get(section, {}):
                raise ConfigError(f"missing required key [{section}] {key}")
    return build(values)


def build(values: dict) -> RunConfig:
    run = values.get("run", {})
    try:
        gen = GenConfig(**values.get("grid", {}), **values.get("generator", {}))
        shift_vals = dict(values.get("shift", {}))
        preset = shift_vals.pop("preset", None)
        if preset is not None:
            if preset not in SHIFT_PRESETS:
                raise ConfigError(f"[shift] preset: unknown shift preset {preset!r}")
            shift = replace(SHIFT_PRESETS[preset], **shift_vals)
            shift_name = preset if not shift_vals else preset + "*"
        elif shift_vals:
            shift, shift_name = ShiftSpec(**shift_vals), "custom"
        else:
            shift, shift_name = RunConfig.shift, RunConfig.shift_name
        pre = dict(values.get("pretrain", {}))
        n_train = pre.pop("n_scenes", RunConfig.n_train)
        n_eval = pre.pop("n_eval", RunConfig.n_source_eval)
        train = TrainConfig(**pre, seed=run["seed"])
        stream = values.get("stream", {})
        adapt = AdaptConfig(**values.get("adapt", {}))
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    cfg = RunConfig(
        name=run["name"], seed=run["seed"], seeds=run.get("seeds", RunConfig.seeds),
        gen=gen, shift=shift, shift_name=shift_name, train=train,
        n_train=n_train, n_source_eval=n_eval,
        n_batches=stream.get("n_batches", RunConfig.n_batches),
        batch_size=stream.get("batch_size", RunConfig.batch_size),
        adapt=adapt, out=run.get("out", RunConfig.out),
    )
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if cfg.n_train < 1 or cfg.n_source_eval < 1:
        raise ConfigError("[pretrain] n_scenes and n_eval must be >= 1")
    if cfg.n_batches < 1 or cfg.batch_size < 1:
        raise ConfigError("[stream] n_batches and batch_size must be >= 1")
    if cfg.train.epochs < 0 or not cfg.train.lr > 0 or cfg.train.hidden < 1:
        raise ConfigError("[pretrain] needs epochs >= 0, lr > 0, hidden >= 1")
    if not cfg.seeds:
        raise ConfigError("[run] seeds must list at least one seed")
    if not math.isfinite(cfg.adapt.c_stop):
        raise ConfigError("[adapt] c_stop must be finite")


def load(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError:
        raise
    return parse(text, str(p))


def preset_names() -> list[str]:
    return sorted(p.name[:-4] for p in resources.files("dpo3d").joinpath("presets").iterdir()
                  if p.name.endswith(".ini"))


def load_preset(name: str) -> RunConfig:
    res = resources.files("dpo3d").joinpath("presets", f"{name}.ini")
    if not res.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return parse(res.read_text(), f"preset:{name}")


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    return replace(cfg, seed=seed, train=replace(cfg.train, seed=seed))


def with_adapt(cfg: RunConfig, **changes) -> RunConfig:
    try:
        return replace(cfg, adapt=replace(cfg.adapt, **changes))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
