"""Discrete-MDP contract shared by every environment.

States are plain tuples of ints so they hash, compare by value and serialize
without ceremony. Environments own an RNG used only at reset (and, for the
rule-breaking traffic vehicle, per step); ``snapshot``/``restore`` capture it so
successor enumeration does not disturb a running episode.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

State = tuple  # tuple[int, ...]


class InvalidStateError(ValueError):
    pass


class InvalidActionError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureDomain:
    name: str
    cardinality: int
    role: str = ""

    def __post_init__(self):
        if self.cardinality < 1:
            raise ValueError(f"feature {self.name!r} needs cardinality >= 1")

    def contains(self, value: int) -> bool:
        return 0 <= int(value) < self.cardinality


@dataclass(frozen=True)
class Transition:
    state: State
    action: int
    reward: float
    next_state: State
    terminal: bool
    episode: int = 0

    def to_json(self) -> str:
        # field order is part of the file format
        return json.dumps(
            {
                "state": list(self.state),
                "action": self.action,
                "reward": self.reward,
                "next_state": list(self.next_state),
                "terminal": self.terminal,
                "episode": self.episode,
            }
        )

    @classmethod
    def from_json(cls, line: str) -> "Transition":
        d = json.loads(line)
        return cls(
            tuple(d["state"]),
            int(d["action"]),
            float(d["reward"]),
            tuple(d["next_state"]),
            bool(d["terminal"]),
            int(d.get("episode", 0)),
        )


def write_transitions(path, transitions: Iterable[Transition], meta: dict | None = None) -> None:
    """One JSON object per line; an optional leading ``{"meta": ...}`` line."""
    with open(path, "w", encoding="utf-8") as f:
        if meta is not None:
            f.write(json.dumps({"meta": meta}, sort_keys=True) + "\n")
        for t in transitions:
            f.write(t.to_json() + "\n")


def read_transitions(path) -> list[Transition]:
    with open(path, encoding="utf-8") as f:
        return [Transition.from_json(line) for line in f if line.strip() and not line.startswith('{"meta"')]


@dataclass
class EnvSpec:
    env_id: str
    features: list[FeatureDomain]
    n_actions: int
    max_steps: int = 200
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate feature names in {names}")
        if self.n_actions < 1 or self.max_steps < 1:
            raise ValueError("n_actions and max_steps must be positive")

    @property
    def n_features(self) -> int:
        return len(self.features)

    @property
    def feature_names(self) -> list[str]:
        return [f.name for f in self.features]

    def index(self, name: str) -> int:
        try:
            return self.feature_names.index(name)
        except ValueError:
            raise KeyError(f"unknown feature {name!r} for {self.env_id}") from None


class DiscreteEnv:
    """Base class for discrete-feature environments.

    Subclasses implement ``_initial_state(rng)`` and ``_transition(state, action)``
    returning ``(next_state, reward, terminal)``. Everything else (validation,
    time limit, interventions, successor enumeration) lives here.
    """

    spec: EnvSpec
    action_names: Sequence[str] = ()

    def __init__(self, spec: EnvSpec):
        self.spec = spec
        self.rng = np.random.default_rng(spec.seed)
        self.state: State | None = None
        self.t = 0
        self.truncated = False
        self.clamp: tuple[int, int] | None = None

    # -- contract -------------------------------------------------------
    def _initial_state(self, rng: np.random.Generator) -> State:
        raise NotImplementedError

    def _transition(self, state: State, action: int) -> tuple[State, float, bool]:
        raise NotImplementedError

    def admissible(self, state: State) -> bool:
        """Physically meaningful configuration (beyond per-feature domains)."""
        return True

    def _propagate(self, before: State, after: State, feature: int) -> State:
        """Apply structural equations of the intervened feature's children."""
        return after

    # -- public API -----------------------------------------------------
    @property
    def n_features(self) -> int:
        return self.spec.n_features

    @property
    def n_actions(self) -> int:
        return self.spec.n_actions

    def validate(self, state: Sequence[int]) -> State:
        state = tuple(int(v) for v in state)
        if len(state) != self.n_features:
            raise InvalidStateError(
                f"state has {len(state)} features, {self.spec.env_id} expects {self.n_features}"
            )
        for v, dom in zip(state, self.spec.features):
            if not dom.contains(v):
                raise InvalidStateError(
                    f"value {v} outside domain of {dom.name!r} (0..{dom.cardinality - 1})"
                )
        return state

    def reset(self, seed: int | None = None) -> State:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.state = self.validate(self._initial_state(self.rng))
        self.t = 0
        self.truncated = False
        self.clamp = None
        return self.state

    def set_state(self, state: Sequence[int], t: int = 0) -> "DiscreteEnv":
        self.state = self.validate(state)
        self.t = t
        self.truncated = False
        return self

    def step(self, action: int) -> tuple[State, float, bool]:
        if self.state is None:
            raise RuntimeError("call reset() or set_state() before step()")
        if not 0 <= int(action) < self.n_actions:
            raise InvalidActionError(
                f"action {action} invalid; {self.spec.env_id} has {self.n_actions} actions"
            )
        nxt, reward, terminal = self._transition(self.state, int(action))
        if self.clamp is not None and not terminal:
            nxt = self.intervene(nxt, *self.clamp)
        self.t += 1
        if not terminal and self.t >= self.spec.max_steps:
            terminal = True
            self.truncated = True
        self.state = nxt
        return nxt, float(reward), bool(terminal)

    def intervene(self, state: Sequence[int], feature: int, value: int) -> State:
        """do(feature -> value): set one feature, sever its incoming coupling."""
        state = tuple(int(v) for v in state)
        if not 0 <= feature < self.n_features:
            raise IndexError(f"feature index {feature} out of range")
        dom = self.spec.features[feature]
        if not dom.contains(value):
            raise InvalidStateError(f"value {value} outside domain of {dom.name!r}")
        after = list(state)
        after[feature] = int(value)
        return self._propagate(state, tuple(after), feature)

    def snapshot(self):
        return (self.state, self.t, self.truncated, self.clamp, copy.deepcopy(self.rng.bit_generator.state))

    def restore(self, snap) -> None:
        self.state, self.t, self.truncated, self.clamp, rng_state = snap
        self.rng.bit_generator.state = copy.deepcopy(rng_state)

    def successor_steps(self, state: Sequence[int]) -> list[tuple[int, State, float, bool]]:
        """(action, next_state, reward, terminal) for every action, env untouched."""
        snap = self.snapshot()
        out = []
        try:
            for a in range(self.n_actions):
                self.set_state(state)
                self.rng.bit_generator.state = copy.deepcopy(snap[4])
                self.clamp = None
                nxt, r, term = self.step(a)
                out.append((a, nxt, r, term and not self.truncated))
        finally:
            self.restore(snap)
        return out

    def successors(self, state: Sequence[int]) -> set[State]:
        return {nxt for _, nxt, _, _ in self.successor_steps(state)}

    def clone(self) -> "DiscreteEnv":
        return copy.deepcopy(self)

    def describe(self, state: Sequence[int]) -> dict:
        return dict(zip(self.spec.feature_names, (int(v) for v in state)))


def rollout(env: DiscreteEnv, act, start: State | None = None, seed: int | None = None,
            max_steps: int | None = None, episode: int = 0) -> Iterator[Transition]:
    """Run ``act(state) -> action`` until termination (or ``max_steps``)."""
    state = env.set_state(start).state if start is not None else env.reset(seed)
    n = 0
    while True:
        a = int(act(state))
        nxt, r, done = env.step(a)
        yield Transition(state, a, r, nxt, done, episode)
        n += 1
        state = nxt
        if done or (max_steps is not None and n >= max_steps):
            return
