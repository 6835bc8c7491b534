"""Compare the audited policy with every subset policy inside each alternative
environment and flag the ones where a subset does significantly better."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

from .analyzer import (
    AlternativeEnvironment,
    CriticalState,
    TransitionLog,
    collect_transitions,
    extract_critical,
    generate_alternatives,
)
from .core import DiscreteEnv, State
from .feature_policy import FeatureParametrizedPolicy, SubsetCatalog, n_active, subset_str
from .learner import Policy

log = logging.getLogger(__name__)


# failure penalty (10) less the one living step (1) a safe alternative pays
DEFAULT_DELTA = 9.0


@dataclass
class DetectorConfig:
    k: int
    delta: float = DEFAULT_DELTA
    alpha: float = 0.9
    episodes: int = 100
    seed: int = 0
    value_tolerance: float = 0.0
    persistent: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.delta <= 0:
            raise ValueError("delta must be > 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")


DEFAULT_DETECTOR = {
    "taxi": DetectorConfig(k=3),
    "minigrid": DetectorConfig(k=1, value_tolerance=0.5),
}


@dataclass
class RolloutResult:
    policy: str
    k: int
    ret: float
    terminated: bool
    actions: list[int] = field(default_factory=list)


def rollout_return(env: DiscreteEnv, start: State, policy: Callable[[State], int], k: int,
                   clamp: tuple[int, int] | None = None, name: str = "policy") -> RolloutResult:
    """Undiscounted return of ``policy`` over at most ``k`` greedy steps from ``start``.

    ``clamp=(feature, value)`` keeps that feature intervened on every step.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    env = env.clone()
    env.set_state(start)
    env.clamp = clamp
    state, total, actions, done = env.state, 0.0, [], False
    for _ in range(k):
        a = int(policy(state))
        state, r, done = env.step(a)
        total += r
        actions.append(a)
        if done:
            break
    return RolloutResult(name, k, total, bool(done and not env.truncated), actions)


def alternative_return(env, alt: AlternativeEnvironment, policy, k, persistent=True, name="policy"):
    clamp = (alt.feature, alt.value) if persistent else None
    return rollout_return(env, alt.state, policy, k, clamp, name)


@dataclass
class ConfusionFinding:
    critical_state: State
    feature: str
    feature_index: int
    value: int
    alternative_state: State
    novelty: float
    audited_return: float
    subset_returns: list[float]
    nominal_audited_return: float
    nominal_subset_returns: list[float]
    best_subset: tuple
    best_return: float
    margin: float

    @property
    def recommended_subset(self) -> tuple:
        return self.best_subset

    def to_dict(self) -> dict:
        d = asdict(self)
        d["critical_state"] = list(self.critical_state)
        d["alternative_state"] = list(self.alternative_state)
        d["best_subset"] = list(self.best_subset)
        d["recommended_subset"] = list(self.best_subset)
        d["novelty"] = round(self.novelty, 6)
        return d


def choose_subset(alt_returns: Sequence[float], nominal_returns: Sequence[float],
                  catalog: SubsetCatalog) -> int:
    """Best alternative return; ties go to the better return in the original
    critical state, then to fewer observed features, then to catalog order."""
    return min(
        range(len(catalog)),
        key=lambda i: (-alt_returns[i], -nominal_returns[i], n_active(catalog[i]), i),
    )


def detect(env: DiscreteEnv, alt: AlternativeEnvironment, audited: Callable[[State], int],
           subset_policies: Sequence[Callable[[State], int]], catalog: SubsetCatalog, k: int,
           delta: float, persistent: bool = True, nominal: tuple[float, list[float]] | None = None
           ) -> ConfusionFinding | None:
    """Flag ``alt`` when some subset policy beats the audited one by at least ``delta``."""
    if delta <= 0:
        raise ValueError("delta must be > 0")
    r_pi = alternative_return(env, alt, audited, k, persistent).ret
    r_sub = [alternative_return(env, alt, p, k, persistent).ret for p in subset_policies]
    if max(r_sub) - r_pi < delta:
        return None
    if nominal is None:
        nominal = (
            rollout_return(env, alt.base, audited, k).ret,
            [rollout_return(env, alt.base, p, k).ret for p in subset_policies],
        )
    best = choose_subset(r_sub, nominal[1], catalog)
    return ConfusionFinding(
        critical_state=alt.base,
        feature=env.spec.feature_names[alt.feature],
        feature_index=alt.feature,
        value=alt.value,
        alternative_state=alt.state,
        novelty=alt.novelty,
        audited_return=r_pi,
        subset_returns=r_sub,
        nominal_audited_return=nominal[0],
        nominal_subset_returns=list(nominal[1]),
        best_subset=catalog[best],
        best_return=r_sub[best],
        margin=r_sub[best] - r_pi,
    )


@dataclass
class ConfusionReport:
    policy_id: str
    env_id: str
    feature_names: list[str]
    catalog: list[list[int]]
    episodes: int
    transitions: int
    critical_states: list[CriticalState]
    alternatives: dict[int, list[AlternativeEnvironment]]
    findings: list[ConfusionFinding]
    metadata: dict
    warnings: list[str] = field(default_factory=list)

    @property
    def avg_alternatives(self) -> float:
        if not self.critical_states:
            return 0.0
        return sum(len(v) for v in self.alternatives.values()) / len(self.critical_states)

    @property
    def confused_states(self) -> list[State]:
        seen = {}
        for f in self.findings:
            seen.setdefault(tuple(f.critical_state), None)
        return list(seen)

    def summary_row(self) -> dict:
        return {
            "policy": self.policy_id,
            "episodes": self.episodes,
            "transitions": self.transitions,
            "critical_states": len(self.critical_states),
            "avg_alternatives": round(self.avg_alternatives, 2),
            "detections": len(self.confused_states),
            "findings": len(self.findings),
        }

    def per_state(self) -> list[dict]:
        rows = []
        for i, cs in enumerate(self.critical_states):
            n_find = sum(1 for f in self.findings if tuple(f.critical_state) == cs.state)
            rows.append({"index": i, "state": list(cs.state), "value": round(cs.value, 6),
                         "alternatives": len(self.alternatives.get(i, [])), "findings": n_find})
        return rows

    def to_dict(self) -> dict:
        names = self.feature_names
        return {
            "policy_id": self.policy_id,
            "env_id": self.env_id,
            "feature_names": names,
            "catalog": self.catalog,
            "summary": self.summary_row(),
            "per_critical_state": self.per_state(),
            "critical_states": [cs.to_dict(names) for cs in self.critical_states],
            "alternatives": {
                str(i): [a.to_dict(names) for a in alts] for i, alts in sorted(self.alternatives.items())
            },
            "findings": [f.to_dict() for f in self.findings],
            "by_feature": group_by_feature(self.findings),
            "recommendations": recommend(self),
            "metadata": self.metadata,
            "warnings": self.warnings,
        }


def group_by_feature(findings: Sequence[ConfusionFinding]) -> dict[str, list[dict]]:
    out: dict[str, list[dict]] = {}
    for f in findings:
        out.setdefault(f.feature, []).append(
            {"critical_state": list(f.critical_state), "value": f.value, "margin": f.margin}
        )
    return out


def recommend(report: "ConfusionReport | dict") -> list[dict]:
    """Group findings by (intervened feature, winning subset)."""
    findings = report.findings if isinstance(report, ConfusionReport) else report["findings"]
    groups: dict[tuple, dict] = {}
    for f in findings:
        f = f.to_dict() if isinstance(f, ConfusionFinding) else f
        key = (f["feature"], tuple(f["best_subset"]))
        g = groups.setdefault(key, {"feature": f["feature"], "subset": list(f["best_subset"]),
                                    "subset_str": subset_str(f["best_subset"]),
                                    "critical_states": [], "findings": 0})
        g["findings"] += 1
        if list(f["critical_state"]) not in g["critical_states"]:
            g["critical_states"].append(list(f["critical_state"]))
    return list(groups.values())


def audit(audited: Policy, fp: FeatureParametrizedPolicy, env: DiscreteEnv, config: DetectorConfig,
          policy_id: str = "audited", metadata: dict | None = None,
          log_out: list | None = None) -> ConfusionReport:
    """Collect experience, extract critical states, intervene, compare."""
    if fp.catalog.n_features != env.n_features:
        raise ValueError("feature-parametrized policy and environment disagree on feature count")
    tlog: TransitionLog = collect_transitions(audited.act, env, config.episodes, config.seed)
    if log_out is not None:
        log_out.extend(tlog.transitions)
    critical = extract_critical(audited.value, env, tlog, config.value_tolerance)
    catalog = fp.catalog
    subset_policies = [p.act for p in fp.policies()]
    alternatives: dict[int, list[AlternativeEnvironment]] = {}
    findings: list[ConfusionFinding] = []
    warnings = []
    if not critical:
        warnings.append("no critical states extracted; nothing to audit")
    for i, cs in enumerate(critical):
        alts = generate_alternatives(cs.state, tlog, config.alpha, env)
        alternatives[i] = alts
        nominal = (
            rollout_return(env, cs.state, audited.act, config.k).ret,
            [rollout_return(env, cs.state, p, config.k).ret for p in subset_policies],
        )
        for alt in alts:
            f = detect(env, alt, audited.act, subset_policies, catalog, config.k, config.delta,
                       config.persistent, nominal)
            if f is not None:
                findings.append(f)
    log.info("%s: %d transitions, %d critical states, %d findings",
             policy_id, len(tlog), len(critical), len(findings))
    meta = {"detector": asdict(config), "env": {"id": env.spec.env_id, **env.spec.params}}
    meta.update(metadata or {})
    return ConfusionReport(
        policy_id=policy_id,
        env_id=env.spec.env_id,
        feature_names=env.spec.feature_names,
        catalog=catalog.to_list(),
        episodes=tlog.episodes,
        transitions=len(tlog),
        critical_states=critical,
        alternatives=alternatives,
        findings=findings,
        metadata=meta,
        warnings=warnings,
    )
