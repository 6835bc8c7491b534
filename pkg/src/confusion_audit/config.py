"""Experiment configuration and observation-randomization protocols.

A protocol is a list of rules, each a conjunction of feature comparisons plus
the features to resample uniformly when it holds.  The first matching rule
wins.  Protocols only touch what the learner observes, never the environment.
"""
from __future__ import annotations

import copy
import json
import operator
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .core import DiscreteEnv, EnvSpec, State
from .detector import DEFAULT_DETECTOR, DetectorConfig
from .feature_policy import DEFAULT_CATALOGS, SubsetCatalog
from .learner import TrainConfig, default_config

OPS = {"==": operator.eq, "!=": operator.ne, "<": operator.lt, "<=": operator.le,
       ">": operator.gt, ">=": operator.ge}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Atom:
    """``feature op value`` where value is an int or another feature's name."""
    feature: str
    op: str
    value: int | str

    @classmethod
    def parse(cls, raw) -> "Atom":
        if isinstance(raw, dict):
            raw = (raw["feature"], raw.get("op", "=="), raw["value"])
        if len(raw) != 3:
            raise ConfigError(f"predicate atom must be [feature, op, value], got {raw!r}")
        f, op, v = raw
        if op not in OPS:
            raise ConfigError(f"unknown operator {op!r}")
        return cls(str(f), op, v if isinstance(v, str) else int(v))

    def holds(self, state: Sequence[int], spec: EnvSpec) -> bool:
        lhs = state[spec.index(self.feature)]
        rhs = state[spec.index(self.value)] if isinstance(self.value, str) else self.value
        return OPS[self.op](lhs, rhs)

    def to_list(self) -> list:
        return [self.feature, self.op, self.value]


@dataclass(frozen=True)
class Rule:
    when: tuple[Atom, ...]
    randomize: tuple[str, ...]

    @classmethod
    def parse(cls, raw: dict) -> "Rule":
        return cls(tuple(Atom.parse(a) for a in raw.get("when", [])), tuple(raw.get("randomize", [])))

    def matches(self, state, spec) -> bool:
        return all(a.holds(state, spec) for a in self.when)

    def to_dict(self) -> dict:
        return {"when": [a.to_list() for a in self.when], "randomize": list(self.randomize)}


@dataclass(frozen=True)
class Protocol:
    rules: tuple[Rule, ...] = ()

    @classmethod
    def parse(cls, raw) -> "Protocol":
        return cls(tuple(Rule.parse(r) for r in raw or []))

    def validate(self, spec: EnvSpec) -> None:
        for r in self.rules:
            for name in r.randomize:
                spec.index(name)
            for a in r.when:
                spec.index(a.feature)
                if isinstance(a.value, str):
                    spec.index(a.value)

    def features_for(self, state, spec) -> tuple[str, ...]:
        for r in self.rules:
            if r.matches(state, spec):
                return r.randomize
        return ()

    def observe(self, state: State, rng: np.random.Generator, spec: EnvSpec) -> np.ndarray:
        obs = np.asarray(state, dtype=np.float64)
        for name in self.features_for(state, spec):
            i = spec.index(name)
            obs[i] = rng.integers(spec.features[i].cardinality)
        return obs

    def observer(self, env: DiscreteEnv):
        """Observation hook for ``train_policy``."""
        self.validate(env.spec)
        if not self.rules:
            return None
        return lambda s, rng: self.observe(s, rng, env.spec)

    def to_list(self) -> list:
        return [r.to_dict() for r in self.rules]


# per-env defaults; "collect" params are used for the audit's nominal rollouts
ENV_DEFAULTS: dict[str, dict[str, Any]] = {
    "taxi": {
        "env": {"p_couple": 0.95, "max_steps": 200},
        "collect_env": {"p_couple": 1.0},
        # hidden destination + uncoupled passengers is aliased; train where the proxy always holds
        "confused_env": {"p_couple": 1.0},
        "correct_env": {},
        "protocols": {
            "confused": [{"when": [], "randomize": ["destination"]}],
            "correct": [
                {"when": [["passenger_loc", "==", 4]], "randomize": ["descriptor"]},
                {"when": [], "randomize": ["destination"]},
            ],
        },
    },
    "minigrid": {
        "env": {"length": 6, "light_pos": 3, "rule_following": True, "p_violate": 0.3,
                "random_start_prob": 0.5, "max_steps": 200},
        "collect_env": {"random_start_prob": 0.0, "rule_following": True},
        "confused_env": {},
        "correct_env": {"rule_following": False},
        "protocols": {
            "confused": [{"when": [], "randomize": ["light_color"]}],
            "correct": [
                {"when": [["agent_pos", "==", "light_pos"], ["light_color", "==", 0]],
                 "randomize": ["vehicle_action"]},
                {"when": [], "randomize": ["light_color"]},
            ],
        },
    },
}


@dataclass
class ExperimentConfig:
    env_id: str
    env: dict = field(default_factory=dict)
    collect_env: dict = field(default_factory=dict)
    confused_env: dict = field(default_factory=dict)
    correct_env: dict = field(default_factory=dict)
    train: TrainConfig | None = None
    train_fp: TrainConfig | None = None
    catalog: SubsetCatalog | None = None
    protocols: dict = field(default_factory=dict)
    detector: DetectorConfig | None = None
    seed: int = 0
    out: str = "out"

    def protocol(self, name: str) -> Protocol:
        try:
            return Protocol.parse(self.protocols[name])
        except KeyError:
            raise ConfigError(f"unknown protocol {name!r}; have {sorted(self.protocols)}") from None

    def env_params(self, role: str = "train") -> dict:
        """Environment parameters for a role: train, confused, correct, collect."""
        params = dict(self.env)
        if role in ("confused", "correct"):
            params.update(getattr(self, f"{role}_env"))
        elif role == "collect":
            params.update(self.collect_env)
        return params

    def to_dict(self) -> dict:
        return {
            "env_id": self.env_id,
            "env": self.env,
            "collect_env": self.collect_env,
            "confused_env": self.confused_env,
            "correct_env": self.correct_env,
            "train": self.train.to_dict(),
            "train_fp": self.train_fp.to_dict(),
            "catalog": self.catalog.to_list(),
            "protocols": self.protocols,
            "detector": self.detector.__dict__.copy(),
            "seed": self.seed,
        }


def _train_config(base: TrainConfig, overrides: dict | None, seed: int) -> TrainConfig:
    overrides = dict(overrides or {})
    unknown = set(overrides) - set(base.to_dict())
    if unknown:
        raise ConfigError(f"unknown train keys: {sorted(unknown)}")
    overrides.setdefault("seed", seed)
    return base.with_(**overrides)


def build_config(env_id: str, overrides: dict | None = None, seed: int | None = None,
                 out: str | None = None) -> ExperimentConfig:
    """Defaults for ``env_id`` with per-key ``overrides`` (as read from a config file)."""
    if env_id not in ENV_DEFAULTS:
        raise ConfigError(f"unknown environment {env_id!r}; choose from {sorted(ENV_DEFAULTS)}")
    o = copy.deepcopy(overrides or {})
    o.pop("env_id", None)
    known = {"env", "collect_env", "confused_env", "correct_env", "train", "train_fp", "catalog",
             "protocols", "detector", "seed", "out"}
    unknown = set(o) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    d = copy.deepcopy(ENV_DEFAULTS[env_id])
    seed = int(seed if seed is not None else o.get("seed", 0))
    for key in ("env", "collect_env", "confused_env", "correct_env"):
        d[key].update(o.get(key, {}))
    protocols = dict(d["protocols"])
    protocols.update(o.get("protocols", {}))
    det = DEFAULT_DETECTOR[env_id].__dict__.copy()
    det.update(o.get("detector", {}))
    if "seed" not in o.get("detector", {}):
        det["seed"] = seed
    try:
        detector = DetectorConfig(**det)
    except TypeError as e:
        raise ConfigError(f"bad detector config: {e}") from None
    catalog = SubsetCatalog(o["catalog"]) if "catalog" in o else DEFAULT_CATALOGS[env_id]
    cfg = ExperimentConfig(
        env_id=env_id,
        env=d["env"],
        collect_env=d["collect_env"],
        confused_env=d["confused_env"],
        correct_env=d["correct_env"],
        train=_train_config(default_config(env_id), o.get("train"), seed),
        train_fp=_train_config(default_config(env_id, True), o.get("train_fp"), seed),
        catalog=catalog,
        protocols=protocols,
        detector=detector,
        seed=seed,
        out=out or o.get("out", "out"),
    )
    from .envs import make_env
    spec = make_env(env_id, **cfg.env_params()).spec
    if catalog.n_features != spec.n_features:
        raise ConfigError(f"catalog subsets have {catalog.n_features} entries, env has {spec.n_features}")
    for name in protocols:
        cfg.protocol(name).validate(spec)
    return cfg


def load_config(path: str | Path | None, env_id: str | None = None, seed: int | None = None,
                out: str | None = None) -> ExperimentConfig:
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
    env_id = env_id or raw.get("env_id")
    if env_id is None:
        raise ConfigError("environment not given (use --env or env_id in the config file)")
    return build_config(env_id, raw, seed, out)
