"""Critical-state extraction, state novelty and alternative environments."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import DiscreteEnv, State, Transition, rollout


@dataclass
class TransitionLog:
    transitions: list[Transition] = field(default_factory=list)
    counts: Counter = field(default_factory=Counter)

    @classmethod
    def from_transitions(cls, transitions: Sequence[Transition]) -> "TransitionLog":
        log = cls(list(transitions))
        log.counts = Counter(t.state for t in log.transitions)
        return log

    def __len__(self):
        return len(self.transitions)

    def n(self, state: Sequence[int]) -> int:
        return self.counts.get(tuple(state), 0)

    @property
    def episodes(self) -> int:
        return len({t.episode for t in self.transitions})

    def distinct_states(self) -> list[State]:
        """Visited states in order of first appearance."""
        seen = {}
        for t in self.transitions:
            seen.setdefault(t.state, None)
        return list(seen)


def collect_transitions(policy: Callable[[State], int], env: DiscreteEnv, episodes: int,
                        seed: int = 0) -> TransitionLog:
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    env = env.clone()
    rng = np.random.default_rng(seed)
    out: list[Transition] = []
    for ep in range(episodes):
        out.extend(rollout(env, policy, seed=int(rng.integers(2 ** 31)), episode=ep))
    return TransitionLog.from_transitions(out)


@dataclass
class CriticalState:
    state: State
    value: float
    # (action, successor, terminal, successor value); terminal successors are worth 0
    successors: list[tuple[int, State, bool, float]]

    def to_dict(self, names: Sequence[str]) -> dict:
        return {
            "state": list(self.state),
            "features": dict(zip(names, self.state)),
            "value": round(self.value, 6),
            "successors": [
                {"action": a, "state": list(s), "terminal": term, "value": round(v, 6)}
                for a, s, term, v in self.successors
            ],
        }


def successor_values(value_fn: Callable[[State], float], env: DiscreteEnv, state: State):
    return [
        (a, nxt, term, 0.0 if term else float(value_fn(nxt)))
        for a, nxt, _r, term in env.successor_steps(state)
    ]


def is_local_max(value: float, successors, tolerance: float = 0.0) -> bool:
    return all(value >= v - tolerance for _a, _s, _t, v in successors)


def extract_critical(value_fn: Callable[[State], float], env: DiscreteEnv, log: TransitionLog,
                     tolerance: float = 0.0) -> list[CriticalState]:
    """Visited states whose value is no lower than any one-step successor's.

    ``tolerance`` absorbs approximation noise between states whose true values
    tie (e.g. a step that only moves another vehicle).
    """
    if len(log) == 0:
        raise ValueError("empty transition log")
    out = []
    for s in log.distinct_states():
        v = float(value_fn(s))
        succ = successor_values(value_fn, env, s)
        if is_local_max(v, succ, tolerance):
            out.append(CriticalState(s, v, succ))
    return out


def novelty(state: Sequence[int], log: TransitionLog) -> float:
    n = log.n(state)
    return 1.0 / math.sqrt(n) if n >= 1 else 1.0


@dataclass(frozen=True)
class AlternativeEnvironment:
    base: State
    feature: int
    value: int
    state: State
    novelty: float

    def to_dict(self, names: Sequence[str]) -> dict:
        return {
            "base": list(self.base),
            "feature": names[self.feature],
            "feature_index": self.feature,
            "value": self.value,
            "state": list(self.state),
            "novelty": round(self.novelty, 6),
        }


def generate_alternatives(base: State, log: TransitionLog, alpha: float,
                          env: DiscreteEnv) -> list[AlternativeEnvironment]:
    """Single-feature interventions on ``base`` leading to states more novel than ``alpha``.

    Interventions that keep the current value, or produce a configuration the
    environment rules out physically, are skipped.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    out = []
    for f, dom in enumerate(env.spec.features):
        for v in range(dom.cardinality):
            if v == base[f]:
                continue
            s = env.intervene(base, f, v)
            if not env.admissible(s):
                continue
            nov = novelty(s, log)
            if nov > alpha:
                out.append(AlternativeEnvironment(tuple(base), f, v, s, nov))
    return out
