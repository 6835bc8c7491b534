"""Command-line entry point: train, train-fp, audit, report, reproduce."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config
from .core import write_transitions
from .detector import ConfusionReport, audit, recommend
from .envs import make_env
from .feature_policy import FeatureParametrizedPolicy, SubsetCatalog, subset_str, train_feature_parametrized
from .learner import (
    Policy,
    TrainingDiverged,
    config_hash,
    identity_encoder,
    load_checkpoint,
    save_checkpoint,
    train_policy,
)

log = logging.getLogger("confusion_audit")

POLICY_CKPT = "policy.ckpt"
FP_CKPT = "fp.ckpt"
TRANSITIONS = "transitions.jsonl"
CRITICAL = "critical.json"
ALTERNATIVES = "alternatives.json"
REPORT = "report.json"
SUMMARY = "summary.md"


class CLIError(RuntimeError):
    pass


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _provenance(cfg: ExperimentConfig) -> dict:
    return {"config_hash": config_hash(cfg.to_dict()), "seed": cfg.seed, "version": __version__}


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config, args.env, args.seed, args.out)
    det = {}
    for key in ("delta", "alpha", "k", "episodes"):
        val = getattr(args, key, None)
        if val is not None:
            det[key] = val
    if det:
        try:
            cfg.detector = dataclasses.replace(cfg.detector, **det)
        except ValueError as e:
            raise ConfigError(str(e)) from None
    return cfg


# -- training -------------------------------------------------------------

def train_audited(cfg: ExperimentConfig, protocol: str, path: Path) -> Policy:
    rules = cfg.protocol(protocol) if protocol != "none" else None
    role = protocol if protocol in ("confused", "correct") else "train"
    env = make_env(cfg.env_id, seed=cfg.seed, **cfg.env_params(role))
    observe = rules.observer(env) if rules is not None else None
    eval_env = make_env(cfg.env_id, seed=cfg.seed, **cfg.env_params("collect"))
    policy, history = train_policy(env, cfg.train, observe, eval_env, name=protocol)
    save_checkpoint(path, policy.net, {
        "kind": "policy",
        "env_id": cfg.env_id,
        "env_params": cfg.env_params(role),
        "protocol": protocol,
        "rules": rules.to_list() if rules is not None else [],
        "train": cfg.train.to_dict(),
        "history": history,
        **_provenance(cfg),
    })
    log.info("wrote %s", path)
    return policy


def train_fp(cfg: ExperimentConfig, path: Path) -> FeatureParametrizedPolicy:
    env = make_env(cfg.env_id, seed=cfg.seed, **cfg.env_params())
    eval_env = make_env(cfg.env_id, seed=cfg.seed, **cfg.env_params("collect"))
    fp, history = train_feature_parametrized(env, cfg.catalog, cfg.train_fp, eval_env)
    save_checkpoint(path, fp.net, {
        "kind": "feature_parametrized",
        "env_id": cfg.env_id,
        "env_params": cfg.env_params(),
        "catalog": cfg.catalog.to_list(),
        "train": cfg.train_fp.to_dict(),
        "history": history,
        **_provenance(cfg),
    })
    log.info("wrote %s", path)
    return fp


def load_policy(path: Path, n_features: int, env_id: str) -> tuple[Policy, dict]:
    net, head = load_checkpoint(path)
    if head.get("kind") != "policy":
        raise CLIError(f"{path}: not an audited-policy checkpoint")
    if head.get("env_id") != env_id:
        raise CLIError(f"{path}: trained on {head.get('env_id')!r}, auditing {env_id!r}")
    if net.shape[0] != n_features:
        raise CLIError(f"{path}: expects {net.shape[0]} features, environment has {n_features}")
    return Policy(net, identity_encoder, head.get("protocol", "policy")), head


def load_fp(path: Path, n_features: int, env_id: str) -> tuple[FeatureParametrizedPolicy, dict]:
    net, head = load_checkpoint(path)
    if head.get("kind") != "feature_parametrized":
        raise CLIError(f"{path}: not a feature-parametrized checkpoint")
    if head.get("env_id") != env_id:
        raise CLIError(f"{path}: trained on {head.get('env_id')!r}, auditing {env_id!r}")
    catalog = SubsetCatalog(head["catalog"])
    if net.shape[0] != 2 * n_features or catalog.n_features != n_features:
        raise CLIError(f"{path}: feature count does not match the environment ({n_features})")
    return FeatureParametrizedPolicy(net, catalog), head


# -- audit ----------------------------------------------------------------

def run_audit(cfg: ExperimentConfig, policy_path: Path, fp_path: Path, out: Path) -> ConfusionReport:
    env = make_env(cfg.env_id, seed=cfg.seed, **cfg.env_params("collect"))
    policy, phead = load_policy(policy_path, env.n_features, cfg.env_id)
    fp, fhead = load_fp(fp_path, env.n_features, cfg.env_id)
    meta = {
        "policy": {"config_hash": phead.get("config_hash"), "seed": phead.get("seed"),
                   "protocol": phead.get("protocol")},
        "fp": {"config_hash": fhead.get("config_hash"), "seed": fhead.get("seed")},
        **_provenance(cfg),
    }
    transitions = []
    report = audit(policy, fp, env, cfg.detector, policy_id=phead.get("protocol", "policy"),
                   metadata=meta, log_out=transitions)
    out.mkdir(parents=True, exist_ok=True)
    doc = report.to_dict()
    write_transitions(out / TRANSITIONS, transitions, meta=meta)
    _dump(out / CRITICAL, {"meta": meta, "feature_names": doc["feature_names"],
                           "critical_states": doc["critical_states"]})
    _dump(out / ALTERNATIVES, {"meta": meta, "feature_names": doc["feature_names"],
                               "alternatives": doc["alternatives"]})
    _dump(out / REPORT, doc)
    (out / SUMMARY).write_text(render_summary([doc]), encoding="utf-8")
    for w in report.warnings:
        log.warning(w)
    return report


# -- reporting --------------------------------------------------------------

def read_report(path: Path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CLIError(f"{path}: corrupt report ({e.msg} at line {e.lineno})") from None
    missing = {"policy_id", "summary", "findings", "feature_names"} - set(doc)
    if missing:
        raise CLIError(f"{path}: corrupt report (missing {sorted(missing)})")
    return doc


def narrate(finding: dict, policy_id: str) -> str:
    return (
        f"In state {tuple(finding['critical_state'])}, intervening {finding['feature']} -> "
        f"{finding['value']} drops {policy_id}'s return to {finding['audited_return']:g} while "
        f"subset {subset_str(finding['best_subset'])} achieves {finding['best_return']:g}."
    )


def render_summary(docs: list[dict]) -> str:
    lines = [
        "| Policy | Episodes | Transitions | Critical states | Avg alternatives | Detections |",
        "|---|---|---|---|---|---|",
    ]
    for d in docs:
        s = d["summary"]
        lines.append(f"| {s['policy']} | {s['episodes']} | {s['transitions']} | {s['critical_states']} "
                     f"| {s['avg_alternatives']:.2f} | {s['detections']} |")
    for d in docs:
        lines += ["", f"## {d['policy_id']} ({d.get('env_id', '?')})", ""]
        if not d["findings"]:
            lines.append("No causal confusion detected.")
            continue
        lines += [f"- {narrate(f, d['policy_id'])}" for f in d["findings"]]
        lines += ["", "Recommended feature subsets:", ""]
        for g in d.get("recommendations") or recommend(d):
            n, m = g["findings"], len(g["critical_states"])
            lines.append(f"- {g['feature']}: observe {g['subset_str']} "
                         f"({n} finding{'s' * (n != 1)} in {m} state{'s' * (m != 1)})")
    return "\n".join(lines) + "\n"


def write_series(doc: dict, out: Path) -> list[Path]:
    """CSV files for external plotting."""
    crit = out / "critical_series.csv"
    with open(crit, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["index", "value", "alternatives", "findings"])
        for row in doc.get("per_critical_state", []):
            w.writerow([row["index"], row["value"], row["alternatives"], row["findings"]])
    find = out / "findings.csv"
    with open(find, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["critical_state", "feature", "value", "audited_return", "best_subset", "best_return", "margin"])
        for fd in doc["findings"]:
            w.writerow([" ".join(map(str, fd["critical_state"])), fd["feature"], fd["value"],
                        fd["audited_return"], subset_str(fd["best_subset"]), fd["best_return"], fd["margin"]])
    return [crit, find]


# -- commands ---------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _config(args)
    if args.protocol != "none":
        cfg.protocol(args.protocol)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    train_audited(cfg, args.protocol, out / POLICY_CKPT)
    return 0


def cmd_train_fp(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    train_fp(cfg, out / FP_CKPT)
    return 0


def cmd_audit(args) -> int:
    env_id = args.env
    out = Path(args.out or "out")
    policy_path = Path(args.policy or out / POLICY_CKPT)
    if env_id is None and args.config is None:
        env_id = load_checkpoint(policy_path)[1].get("env_id")
        args.env = env_id
    cfg = _config(args)
    report = run_audit(cfg, policy_path, Path(args.fp or out / FP_CKPT), out)
    print(json.dumps(report.summary_row(), sort_keys=True))
    return 0


def cmd_report(args) -> int:
    paths = [Path(p) for p in args.reports] or [Path(args.out or "out") / REPORT]
    docs = [read_report(p) for p in paths]
    text = render_summary(docs)
    out = Path(args.out) if args.out else paths[0].parent
    out.mkdir(parents=True, exist_ok=True)
    (out / SUMMARY).write_text(text, encoding="utf-8")
    for d in docs:
        sub = out if len(docs) == 1 else out / d["policy_id"]
        sub.mkdir(parents=True, exist_ok=True)
        write_series(d, sub)
    sys.stdout.write(text)
    return 0


def cmd_reproduce(args) -> int:
    """Train confused, corrected and feature-parametrized policies, audit both."""
    cfg = _config(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    train_fp(cfg, out / FP_CKPT)
    docs = []
    for role in ("confused", "correct"):
        sub = out / role
        sub.mkdir(parents=True, exist_ok=True)
        train_audited(cfg, role, sub / POLICY_CKPT)
        report = run_audit(cfg, sub / POLICY_CKPT, out / FP_CKPT, sub)
        docs.append(report.to_dict())
    text = render_summary(docs)
    (out / SUMMARY).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config; keys override per-environment defaults")
    common.add_argument("--seed", type=int, help="master seed (default from config, else 0)")
    common.add_argument("--out", help="output directory (default: out)")
    common.add_argument("--env", choices=["taxi", "minigrid"])
    common.add_argument("-v", "--verbose", action="store_true")

    det = argparse.ArgumentParser(add_help=False)
    det.add_argument("--delta", type=float, help="significance threshold on return margin")
    det.add_argument("--alpha", type=float, help="novelty threshold for alternatives")
    det.add_argument("--k", type=int, help="rollout horizon")
    det.add_argument("--episodes", type=int, help="episodes collected for the audit")

    p = argparse.ArgumentParser(prog="confusion-audit", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train the audited policy")
    t.add_argument("--protocol", default="none",
                   help="observation-randomization protocol from the config (confused, correct) or none")
    t.set_defaults(func=cmd_train)

    sub.add_parser("train-fp", parents=[common], help="train the feature-parametrized policy"
                   ).set_defaults(func=cmd_train_fp)

    a = sub.add_parser("audit", parents=[common, det], help="audit a policy checkpoint")
    a.add_argument("--policy", help=f"audited policy checkpoint (default: OUT/{POLICY_CKPT})")
    a.add_argument("--fp", help=f"feature-parametrized checkpoint (default: OUT/{FP_CKPT})")
    a.set_defaults(func=cmd_audit)

    r = sub.add_parser("report", parents=[common], help="render summary and plot data from report files")
    r.add_argument("reports", nargs="*", help=f"report files (default: OUT/{REPORT})")
    r.set_defaults(func=cmd_report)

    sub.add_parser("reproduce", parents=[common, det], help="full train/audit run for one environment"
                   ).set_defaults(func=cmd_reproduce)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CLIError, TrainingDiverged, ValueError, KeyError, OSError) as e:
        kind = type(e).__name__
        msg = e.args[0] if isinstance(e, KeyError) and e.args else str(e)
        sys.stderr.write(json.dumps({"error": kind, "message": str(msg)}) + "\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
