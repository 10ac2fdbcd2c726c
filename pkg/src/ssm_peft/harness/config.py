"""Strict JSON experiment configs: unknown keys are errors naming their dotted path."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from ..adapters import spec_from_dict, spec_to_dict
from ..errors import ConfigError
from ..train import TrainConfig

TASKS = ("target-matching", "toy-classification", "oracle-suite")


@dataclass(frozen=True)
class DataSpec:
    D: int = 64
    N: int = 200
    n_train: int = 1
    n_val: int = 0
    low: int | None = None  # None: the task's default input range
    high: int | None = None
    classes: int = 2


@dataclass(frozen=True)
class ModelSpec:
    L: int = 4
    H: int = 8
    activation: str = "linear"
    residual: bool = True
    kind: str = "s4"
    r: int = 1


@dataclass(frozen=True)
class TargetSpec:
    L: int = 1
    H: int = 4
    activation: str = "linear"
    residual: bool = False


@dataclass(frozen=True)
class AdapterEntry:
    name: str
    spec: object


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "target-matching"
    seeds: tuple = (0,)
    output_dir: str = "runs/default"
    data: DataSpec = field(default_factory=DataSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    target: TargetSpec = field(default_factory=TargetSpec)
    adapters: tuple = ()
    train: TrainConfig = field(default_factory=TrainConfig)
    lr_grid: tuple = ()
    timing: str = "off"
    checkpoints: bool = True
    log_y: bool = True
    workers: int = 1
    oracle_trials: int = 10

    def to_dict(self):
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name == "adapters":
                out[f.name] = [{"name": a.name, "spec": spec_to_dict(a.spec)} for a in v]
            elif dataclasses.is_dataclass(v):
                out[f.name] = dataclasses.asdict(v)
                if f.name == "train":
                    del out[f.name]["seed"]  # per-run, from seeds
            elif isinstance(v, tuple):
                out[f.name] = list(v)
            else:
                out[f.name] = v
        return out

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"


_TYPES = {int: (int,), float: (int, float), str: (str,), bool: (bool,)}


def _check_type(path, value, expected):
    if expected in (int, float) and isinstance(value, bool):
        raise ConfigError(path, f"expected {expected.__name__}, got boolean")
    if expected in _TYPES and not isinstance(value, _TYPES[expected]):
        raise ConfigError(path, f"expected {expected.__name__}, got {type(value).__name__}")


def _section(cls, d, path, skip=()):
    if not isinstance(d, dict):
        raise ConfigError(path, "expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls) if f.name not in skip}
    kwargs = {}
    for k, v in d.items():
        if k not in fields:
            raise ConfigError(f"{path}.{k}", f"unknown key; valid keys: {sorted(fields)}")
        ftype = fields[k].type
        ftype = {"int": int, "float": float, "str": str, "bool": bool}.get(ftype, None)
        if ftype is not None:
            _check_type(f"{path}.{k}", v, ftype)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{path}.{exc.key}", str(exc).split(": ", 1)[-1]) from None


def parse_config(d):
    """ExperimentConfig from a decoded JSON object (strict)."""
    if not isinstance(d, dict):
        raise ConfigError("", "config root must be an object")
    fields = {f.name for f in dataclasses.fields(ExperimentConfig)}
    kw = {}
    for k, v in d.items():
        if k not in fields:
            raise ConfigError(k, f"unknown key; valid keys: {sorted(fields)}")
        if k == "data":
            kw[k] = _section(DataSpec, v, k)
            for b in ("low", "high"):
                val = getattr(kw[k], b)
                if val is not None:
                    _check_type(f"data.{b}", val, int)
            if kw[k].low is not None and kw[k].high is not None and kw[k].low >= kw[k].high:
                raise ConfigError("data.high", "must exceed data.low")
        elif k == "model":
            kw[k] = _section(ModelSpec, v, k)
            if kw[k].activation not in ("relu", "linear"):
                raise ConfigError("model.activation", "expected 'relu' or 'linear'")
            if kw[k].kind not in ("s4", "s6"):
                raise ConfigError("model.kind", "expected 's4' or 's6'")
        elif k == "target":
            kw[k] = _section(TargetSpec, v, k)
        elif k == "train":
            if isinstance(v, dict) and "seed" in v:
                raise ConfigError("train.seed", "seeds are set by the top-level 'seeds' list")
            kw[k] = _section(TrainConfig, v, k)
        elif k == "adapters":
            if not isinstance(v, list):
                raise ConfigError(k, "expected a list")
            entries = []
            for i, a in enumerate(v):
                p = f"adapters[{i}]"
                if not isinstance(a, dict):
                    raise ConfigError(p, "expected an object")
                for kk in a:
                    if kk not in ("name", "spec"):
                        raise ConfigError(f"{p}.{kk}", "unknown key; valid keys: ['name', 'spec']")
                if not isinstance(a.get("name"), str):
                    raise ConfigError(f"{p}.name", "expected a string")
                entries.append(AdapterEntry(a["name"], spec_from_dict(a.get("spec"), f"{p}.spec")))
            names = [e.name for e in entries]
            if len(set(names)) != len(names):
                raise ConfigError(k, "adapter names must be unique")
            kw[k] = tuple(entries)
        elif k in ("seeds", "lr_grid"):
            if not isinstance(v, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
                raise ConfigError(k, "expected a list of numbers")
            kw[k] = tuple(int(x) for x in v) if k == "seeds" else tuple(float(x) for x in v)
        else:
            expected = {"task": str, "output_dir": str, "timing": str, "checkpoints": bool, "log_y": bool, "workers": int, "oracle_trials": int}[k]
            _check_type(k, v, expected)
            kw[k] = v
    cfg = ExperimentConfig(**kw)
    if cfg.task not in TASKS:
        raise ConfigError("task", f"expected one of {TASKS}")
    if cfg.timing not in ("on", "off"):
        raise ConfigError("timing", "expected 'on' or 'off'")
    if not cfg.seeds:
        raise ConfigError("seeds", "need at least one seed")
    if cfg.workers < 1:
        raise ConfigError("workers", "must be >= 1")
    if cfg.task != "oracle-suite" and not cfg.adapters:
        raise ConfigError("adapters", "need at least one adapter")
    return cfg


def loads_config(text):
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return parse_config(d)


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return loads_config(fh.read())
