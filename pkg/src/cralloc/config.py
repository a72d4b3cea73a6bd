"""Experiment configuration: one YAML file with a section per stage.

Schema (every key optional; defaults in brackets)::

    seed: 0
    env:        EnvConfig fields, plus channel_count [1], queue_buckets [26],
                queue_bucket_width [10], model_count [2]
    eval:       num_requests [10000], seed_offset [1000]
    budgets:    rates [[0.5, 1.3, 0.5]], slice_capacity [null]
    collect:    superior_fraction [0.0], num_requests [null], noisy [true]
    train:      TrainConfig fields
    correct:    tol [0.005], max_probes [30], per_slice [true]
    static:     StaticConfig fields
    cem:        CemConfig fields, plus subset [2000] (requests used per evaluation)
    pid:        PidConfig fields
    clamp:      ClampConfig fields
    smoothing:  load EMA weight [0.5]
    stream:     StreamConfig fields
    sweep:      alphas [[0.001, 0.01, 0.05, 0.1, 0.5, 1.0]], rounds [[1, 5, 10, 15, 20, 30]]

Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Optional

import yaml

from .baselines import CemConfig, StaticConfig
from .control import ClampConfig, PidConfig
from .core import ActionSpaceSpec, BudgetSpec, ConfigError
from .serving import StreamConfig
from .simenv import EnvConfig
from .train import TrainConfig

SPACE_KEYS = ("channel_count", "queue_buckets", "queue_bucket_width", "model_count")


@dataclass
class CorrectOptions:
    tol: float = 0.005
    max_probes: int = 30
    per_slice: bool = True

    def __post_init__(self):
        if not 0 < self.tol < 1 or self.max_probes < 2:
            raise ConfigError("correction needs 0 < tol < 1 and max_probes >= 2")


@dataclass
class CollectOptions:
    superior_fraction: float = 0.0
    num_requests: Optional[int] = None
    noisy: bool = True


@dataclass
class EvalOptions:
    num_requests: int = 10_000
    seed_offset: int = 1000


@dataclass
class SweepOptions:
    alphas: tuple = (0.001, 0.01, 0.05, 0.1, 0.5, 1.0)
    rounds: tuple = (1, 5, 10, 15, 20, 30)


@dataclass
class ExperimentConfig:
    seed: int = 0
    env: EnvConfig = field(default_factory=EnvConfig)
    eval: EvalOptions = field(default_factory=EvalOptions)
    budgets: BudgetSpec = field(default_factory=BudgetSpec)
    collect: CollectOptions = field(default_factory=CollectOptions)
    train: TrainConfig = field(default_factory=TrainConfig)
    correct: CorrectOptions = field(default_factory=CorrectOptions)
    static: StaticConfig = field(default_factory=StaticConfig)
    cem: CemConfig = field(default_factory=CemConfig)
    cem_subset: int = 2000
    pid: PidConfig = field(default_factory=PidConfig)
    clamp: ClampConfig = field(default_factory=ClampConfig)
    smoothing: float = 0.5
    stream: StreamConfig = field(default_factory=StreamConfig)
    sweep: SweepOptions = field(default_factory=SweepOptions)

    def eval_env(self) -> EnvConfig:
        return dataclasses.replace(self.env, num_requests=self.eval.num_requests,
                                   seed=self.env.seed + self.eval.seed_offset)

    def to_dict(self) -> dict:
        d = _plain(dataclasses.asdict(self))
        space = d["env"].pop("action_space")
        for k in SPACE_KEYS:
            d["env"][k] = space[k]
        d["env"].pop("num_phases", None)
        d["cem"]["subset"] = d.pop("cem_subset")
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(cls, raw: Any, section: str, **extra):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    kw = {}
    for k, v in raw.items():
        kw[k] = tuple(v) if isinstance(v, list) else v
    kw.update(extra)
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ConfigError(f"bad {section!r} section: {exc}") from exc


def from_dict(raw: Optional[dict]) -> ExperimentConfig:
    raw = dict(raw or {})
    known = {f.name for f in dataclasses.fields(ExperimentConfig)} - {"cem_subset"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    seed = int(raw.get("seed", 0))

    env_raw = dict(raw.get("env") or {})
    space = {k: env_raw.pop(k) for k in SPACE_KEYS if k in env_raw}
    env_raw.setdefault("seed", seed)
    env = _build(EnvConfig, env_raw, "env", action_space=_build(ActionSpaceSpec, space, "env"))

    budgets_raw = dict(raw.get("budgets") or {})
    if "slice_capacity" in budgets_raw and budgets_raw["slice_capacity"] is not None:
        budgets_raw["slice_capacity"] = [tuple(r) for r in budgets_raw["slice_capacity"]]
    budgets = _build(BudgetSpec, budgets_raw, "budgets")

    cem_raw = dict(raw.get("cem") or {})
    subset = int(cem_raw.pop("subset", 2000))
    cem_raw.setdefault("seed", seed)
    train_raw = dict(raw.get("train") or {})
    train_raw.setdefault("seed", seed)

    return ExperimentConfig(
        seed=seed,
        env=env,
        eval=_build(EvalOptions, raw.get("eval"), "eval"),
        budgets=budgets,
        collect=_build(CollectOptions, raw.get("collect"), "collect"),
        train=_build(TrainConfig, train_raw, "train"),
        correct=_build(CorrectOptions, raw.get("correct"), "correct"),
        static=_build(StaticConfig, raw.get("static"), "static"),
        cem=_build(CemConfig, cem_raw, "cem"),
        cem_subset=subset,
        pid=_build(PidConfig, raw.get("pid"), "pid"),
        clamp=_build(ClampConfig, raw.get("clamp"), "clamp"),
        smoothing=float(raw.get("smoothing", 0.5)),
        stream=_build(StreamConfig, raw.get("stream"), "stream"),
        sweep=_build(SweepOptions, raw.get("sweep"), "sweep"),
    )


def load_config(path: Optional[str], seed: Optional[int] = None, overrides: Optional[dict] = None) -> ExperimentConfig:
    raw: dict = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a mapping")
    if seed is not None:
        raw["seed"] = seed
        for sec in ("env", "train", "cem"):
            if isinstance(raw.get(sec), dict):
                raw[sec].pop("seed", None)
    for sec, vals in (overrides or {}).items():
        raw.setdefault(sec, {})
        raw[sec] = dict(raw[sec] or {}, **vals)
    return from_dict(raw)
