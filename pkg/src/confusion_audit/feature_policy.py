"""One network, many policies: each feature subset is a binary mask fed
alongside the masked state, and updates only replay transitions gathered
under the same mask."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .core import DiscreteEnv, State
from .learner import (
    Policy,
    QNetwork,
    TrainConfig,
    evaluate_greedy,
    run_dqn,
    state_encoding,
)

Subset = tuple  # tuple[int, ...] of 0/1


def as_subset(mask: Iterable[int]) -> Subset:
    mask = tuple(int(v) for v in mask)
    if any(v not in (0, 1) for v in mask):
        raise ValueError(f"feature subset must be binary, got {mask}")
    return mask


def subset_str(mask: Sequence[int]) -> str:
    return "[" + " ".join(str(v) for v in mask) + "]"


def n_active(mask: Sequence[int]) -> int:
    return int(sum(mask))


class SubsetCatalog:
    """Ordered, duplicate-free list of feature subsets."""

    def __init__(self, subsets: Iterable[Iterable[int]]):
        self.subsets: list[Subset] = [as_subset(m) for m in subsets]
        if not self.subsets:
            raise ValueError("catalog must not be empty")
        if len(set(self.subsets)) != len(self.subsets):
            raise ValueError("catalog contains duplicate subsets")
        lengths = {len(m) for m in self.subsets}
        if len(lengths) != 1:
            raise ValueError("all subsets must have the same length")
        self.n_features = lengths.pop()

    def __len__(self):
        return len(self.subsets)

    def __iter__(self):
        return iter(self.subsets)

    def __getitem__(self, i) -> Subset:
        return self.subsets[i]

    def __contains__(self, mask) -> bool:
        return tuple(mask) in self.subsets

    def index(self, mask) -> int:
        try:
            return self.subsets.index(as_subset(mask))
        except ValueError:
            raise KeyError(f"subset {subset_str(mask)} not in catalog") from None

    def to_list(self) -> list[list[int]]:
        return [list(m) for m in self.subsets]


DEFAULT_CATALOGS = {
    "taxi": SubsetCatalog([(1, 1, 1, 1, 1), (1, 1, 0, 1, 1), (1, 1, 1, 1, 0), (1, 1, 0, 1, 0)]),
    "minigrid": SubsetCatalog([(1, 1, 1, 1, 1, 1), (1, 1, 1, 1, 1, 0), (1, 1, 0, 1, 1, 1)]),
}


def mask_state(state: Sequence[int], subset: Sequence[int]) -> np.ndarray:
    """[state * mask ; mask]"""
    s = np.asarray(state, dtype=np.float64)
    m = np.asarray(subset, dtype=np.float64)
    if s.shape != m.shape:
        raise ValueError(f"state length {s.size} != subset length {m.size}")
    return np.concatenate([s * m, m])


def sample_subset(catalog: SubsetCatalog, rng: np.random.Generator) -> Subset:
    return catalog[int(rng.integers(len(catalog)))]


@dataclass
class FeatureParametrizedPolicy:
    net: QNetwork
    catalog: SubsetCatalog

    def policy_for(self, subset: Sequence[int]) -> Policy:
        subset = as_subset(subset)
        if subset not in self.catalog:
            raise KeyError(f"subset {subset_str(subset)} not in catalog")
        return Policy(self.net, lambda s, m=subset: mask_state(s, m), name=f"subset {subset_str(subset)}")

    def policies(self) -> list[Policy]:
        return [self.policy_for(m) for m in self.catalog]


def train_feature_parametrized(env: DiscreteEnv, catalog: SubsetCatalog, config: TrainConfig,
                               eval_env: DiscreteEnv | None = None) -> tuple[FeatureParametrizedPolicy, dict]:
    if catalog.n_features != env.n_features:
        raise ValueError(f"catalog subsets have {catalog.n_features} entries, env has {env.n_features} features")
    net = QNetwork(2 * env.n_features, config.hidden, env.n_actions,
                   np.random.default_rng(config.seed + 1), encoding=state_encoding(env, masked=True))
    fp = FeatureParametrizedPolicy(net, catalog)
    eval_env = eval_env or env

    def episode_setup(rng):
        i = int(rng.integers(len(catalog)))
        mask = catalog[i]
        return (lambda s, _rng: mask_state(s, mask)), i

    def evaluate(_net) -> float:
        per = config.eval_episodes // len(catalog) or 1
        return float(np.mean([evaluate_greedy(eval_env, p, per) for p in fp.policies()]))

    history = run_dqn(env, net, config, episode_setup, evaluate, tagged=True)
    return fp, history
