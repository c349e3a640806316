"""Run configuration: JSON text with ``data``, ``train``, ``eval`` and ``paths`` sections.

Parsing is strict: unknown keys, duplicate keys and wrongly typed values are
rejected with a message naming the offending key.  A top-level ``seed`` is
required; it seeds every section that does not set its own.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .curriculum import REG_LAYERS, MethodId, TrainConfig, TrainingError
from .retrieval import FEATURE_LAYERS
from .synthdata import DataConfigError, GenConfig, ModalityConfig
from .unitprobe import DEFAULT_K


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    layers: tuple[str, ...] = FEATURE_LAYERS
    num_queries: int | None = None  # None: every validation row is a query
    seed: int = 0
    probe_k: int = DEFAULT_K
    probe_layer: str = "join"


@dataclass
class RunConfig:
    seed: int
    data: GenConfig
    train: TrainConfig
    eval: EvalConfig
    workdir: Path | None = None


def _reject_duplicates(pairs: list[tuple[str, Any]]) -> dict:
    out: dict = {}
    for key, value in pairs:
        if key in out:
            raise ConfigError(f"duplicate key {key!r}")
        out[key] = value
    return out


def _check_keys(section: str, given: dict, allowed) -> None:
    for key in given:
        if key not in allowed:
            where = f"{section}.{key}" if section else key
            raise ConfigError(f"unknown key {where!r}")


def _int(section: str, key: str, value) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{section}.{key} must be an integer")
    return value


def _num(section: str, key: str, value) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{section}.{key} must be a number")
    return float(value)


def _typed(section: str, key: str, value, default):
    """Coerce ``value`` to the type of the dataclass default it replaces."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{section}.{key} must be a boolean")
        return value
    if isinstance(default, int) and not isinstance(default, MethodId):
        return _int(section, key, value)
    if isinstance(default, float):
        return _num(section, key, value)
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{section}.{key} must be a list")
        return tuple(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{section}.{key} must be a string")
        return value
    return value


def _parse_modality(i: int, d) -> ModalityConfig:
    where = f"data.modalities[{i}]"
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    fields = {f.name: f for f in dataclasses.fields(ModalityConfig)}
    _check_keys(where, d, fields)
    for req in ("name", "input_dim"):
        if req not in d:
            raise ConfigError(f"{where} is missing {req!r}")
    defaults = ModalityConfig(name="x", input_dim=1)
    kwargs = {k: _typed(where, k, v, getattr(defaults, k)) for k, v in d.items()}
    return ModalityConfig(**kwargs)


def _parse_data(d: dict, seed: int) -> GenConfig:
    fields = {f.name for f in dataclasses.fields(GenConfig)}
    _check_keys("data", d, fields)
    defaults = GenConfig()
    kwargs: dict[str, Any] = {"seed": seed}
    for k, v in d.items():
        if k == "modalities":
            if not isinstance(v, list):
                raise ConfigError("data.modalities must be a list")
            kwargs[k] = [_parse_modality(i, m) for i, m in enumerate(v)]
        else:
            kwargs[k] = _typed("data", k, v, getattr(defaults, k))
    cfg = GenConfig(**kwargs)
    try:
        cfg.validate()
    except DataConfigError as e:
        raise ConfigError(f"data: {e}") from None
    return cfg


def _parse_train(d: dict, seed: int) -> TrainConfig:
    fields = {f.name for f in dataclasses.fields(TrainConfig)}
    _check_keys("train", d, fields)
    defaults = TrainConfig()
    kwargs: dict[str, Any] = {"seed": seed}
    for k, v in d.items():
        if k == "lambdas":
            if not isinstance(v, dict):
                raise ConfigError("train.lambdas must be an object")
            _check_keys("train.lambdas", v, REG_LAYERS)
            merged = dict(defaults.lambdas)
            merged.update({layer: _num("train.lambdas", layer, lam) for layer, lam in v.items()})
            kwargs[k] = merged
        elif k == "method":
            try:
                kwargs[k] = MethodId(v)
            except ValueError:
                raise ConfigError(f"train.method: unknown method {v!r}") from None
        else:
            kwargs[k] = _typed("train", k, v, getattr(defaults, k))
    try:
        return TrainConfig(**kwargs)
    except TrainingError as e:
        raise ConfigError(f"train: {e}") from None


def _parse_eval(d: dict, seed: int) -> EvalConfig:
    fields = {f.name for f in dataclasses.fields(EvalConfig)}
    _check_keys("eval", d, fields)
    cfg = EvalConfig(seed=seed)
    for k, v in d.items():
        if k == "num_queries":
            if v == "exhaustive" or v is None:
                cfg.num_queries = None
            else:
                cfg.num_queries = _int("eval", k, v)
                if cfg.num_queries < 1:
                    raise ConfigError("eval.num_queries must be >= 1 or \"exhaustive\"")
        else:
            setattr(cfg, k, _typed("eval", k, v, getattr(EvalConfig(), k)))
    for layer in (*cfg.layers, cfg.probe_layer):
        if layer not in FEATURE_LAYERS:
            raise ConfigError(f"eval: unknown layer {layer!r}")
    if not cfg.layers:
        raise ConfigError("eval.layers must not be empty")
    if cfg.probe_k < 1:
        raise ConfigError("eval.probe_k must be >= 1")
    return cfg


def parse_config(text: str, seed_override: int | None = None) -> RunConfig:
    try:
        raw = json.loads(text, object_pairs_hook=_reject_duplicates) if text.strip() else {}
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON at line {e.lineno}: {e.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a JSON object")
    _check_keys("", raw, ("seed", "data", "train", "eval", "paths"))
    if seed_override is not None:
        seed = seed_override
    elif "seed" in raw:
        seed = _int("", "seed", raw["seed"])
    else:
        raise ConfigError("missing required key 'seed'")
    sections = {}
    for name in ("data", "train", "eval", "paths"):
        value = raw.get(name, {})
        if value is None:
            value = {}
        if not isinstance(value, dict):
            raise ConfigError(f"section {name!r} must be an object")
        sections[name] = value

    def section_seed(name: str) -> int:
        s = sections[name]
        if "seed" in s and seed_override is None:
            return _int(name, "seed", s.pop("seed"))
        s.pop("seed", None)
        return seed

    data = _parse_data(sections["data"], section_seed("data"))
    train = _parse_train(sections["train"], section_seed("train"))
    ev = _parse_eval(sections["eval"], section_seed("eval"))
    _check_keys("paths", sections["paths"], ("workdir",))
    workdir = sections["paths"].get("workdir")
    if workdir is not None and not isinstance(workdir, str):
        raise ConfigError("paths.workdir must be a string")
    if train.source_modality not in {m.name for m in data.modalities}:
        raise ConfigError(f"train.source_modality {train.source_modality!r} is not a data modality")
    return RunConfig(seed, data, train, ev, Path(workdir) if workdir else None)


def load_config(path, seed_override: int | None = None) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {p}") from None
    except (OSError, UnicodeDecodeError) as e:
        raise ConfigError(f"cannot read config file {p}: {e}") from None
    return parse_config(text, seed_override)
