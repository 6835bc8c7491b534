"""Shared toy environments for oracle tests."""
import itertools
import sys

import numpy as np
import pytest

from confusion_audit.core import DiscreteEnv, EnvSpec, FeatureDomain


class ChainEnv(DiscreteEnv):
    """Deterministic 5-cell chain. Action 0 left, 1 right; reaching cell 4 pays +10
    and ends the episode, every other step costs -1."""

    action_names = ("left", "right")

    def __init__(self, seed=0, n=5, max_steps=50):
        super().__init__(EnvSpec("chain", [FeatureDomain("pos", n)], n_actions=2, max_steps=max_steps, seed=seed))
        self.n = n

    def _initial_state(self, rng):
        return (int(rng.integers(self.n - 1)),)

    def _transition(self, state, action):
        (p,) = state
        p = max(p - 1, 0) if action == 0 else min(p + 1, self.n - 1)
        if p == self.n - 1:
            return (p,), 10.0, True
        return (p,), -1.0, False


class SignalEnv(DiscreteEnv):
    """Tiny two-feature MDP for detector oracles (8 states).

    Features: pos in {0,1,2,3}, signal in {0,1}. The agent walks right
    (action 1) or waits (action 0). Stepping from pos 2 to 3 pays +10 when
    signal == 1 and -10 (terminal) when signal == 0. Waiting at pos 2 with
    signal 0 flips the signal to 1. Every other step costs -1; pos 3 is terminal.
    """

    action_names = ("wait", "go")

    def __init__(self, seed=0, max_steps=20):
        super().__init__(EnvSpec("signal", [FeatureDomain("pos", 4), FeatureDomain("signal", 2)],
                                 n_actions=2, max_steps=max_steps, seed=seed))

    def _initial_state(self, rng):
        return (0, int(rng.integers(2)))

    def _transition(self, state, action):
        pos, sig = state
        if action == 0:
            if pos == 2 and sig == 0:
                return (pos, 1), -1.0, False
            return (pos, sig), -1.0, False
        if pos == 2:
            return (3, sig), (10.0 if sig == 1 else -10.0), True
        return (min(pos + 1, 3), sig), -1.0, pos + 1 >= 3


def enumerate_states(env):
    return list(itertools.product(*(range(f.cardinality) for f in env.spec.features)))


def value_iteration(env, gamma, iters=500):
    """Exact Q for a deterministic env: {state: np.array(q per action)}."""
    states = enumerate_states(env)
    steps = {s: env.successor_steps(s) for s in states}
    V = {s: 0.0 for s in states}
    Q = {}
    for _ in range(iters):
        Q = {s: np.array([r + (0.0 if term else gamma * V[n]) for _a, n, r, term in steps[s]]) for s in states}
        V = {s: float(q.max()) for s, q in Q.items()}
    return Q


@pytest.fixture
def chain_env():
    return ChainEnv()


@pytest.fixture
def signal_env():
    return SignalEnv()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
