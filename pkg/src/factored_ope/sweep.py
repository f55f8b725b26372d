"""Experiment sweep: domains x methods x batch sizes x trials, CSV + summary.

Every cell derives its random streams from (master seed, cell coordinates),
so cells can run in any order or in parallel and still produce byte-identical
sorted output.  Method thresholds may be overridden per method via
``thresholds_<method>`` sections.
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .domains import make_domain, myopic_target_policy, plan_target_policy
from .evaluators import (EvalResult, evaluate_cis, evaluate_flat,
                         evaluate_known_structure, evaluate_mfmc,
                         evaluate_model_based, normalized_error)
from .fmdp import (ENUM_GUARD, FactoredMdp, Policy, StateSpaceTooLarge,
                   exact_value, monte_carlo_value, sample_batch, spawn_seed)
from .gscope import build_model, learn_structure

CSV_COLUMNS = ["method", "domain", "H", "trial", "seed", "estimate", "stderr",
               "truth", "truth_stderr", "normalized_error", "status",
               "diagnostics"]

KNOWN_METHODS = ("gscope", "ks", "flat", "mfmc", "cis")


@dataclass(frozen=True)
class SweepConfig:
    """Declarative sweep description; round-trips bit-exactly through JSON."""

    domain_name: str
    domain_params: dict = field(default_factory=dict)
    behavior: dict = field(default_factory=lambda: {"kind": "uniform"})
    target: dict = field(default_factory=lambda: {"kind": "planned", "eps_floor": 0.05})
    methods: tuple[str, ...] = KNOWN_METHODS
    h_grid: tuple[int, ...] = (10, 100, 1000)
    trials: int = 20
    thresholds: dict = field(default_factory=lambda: {"eps": 0.2, "delta1": 0.1, "c2": 0.0})
    method_thresholds: dict = field(default_factory=dict)
    eval_rollouts: int = 2000
    truth_rollouts: int = 100000
    mfmc_k: int = 1
    cis_clip: float = 100.0
    horizon: int | None = None
    master_seed: int = 20240601
    full_scale: dict = field(default_factory=dict)

    def __post_init__(self):
        for m in self.methods:
            if m not in KNOWN_METHODS:
                raise ValueError(f"unknown method {m!r}; known: {KNOWN_METHODS}")

    def thresholds_for(self, method: str) -> dict:
        merged = dict(self.thresholds)
        merged.update(self.method_thresholds.get(method, {}))
        return merged

    def to_dict(self) -> dict:
        doc = {
            "domain": {"name": self.domain_name, **self.domain_params},
            "behavior": dict(self.behavior),
            "target": dict(self.target),
            "methods": list(self.methods),
            "H_grid": list(self.h_grid),
            "trials": self.trials,
            "thresholds": dict(self.thresholds),
            "rollouts": {"eval": self.eval_rollouts, "truth": self.truth_rollouts},
            "mfmc": {"k": self.mfmc_k},
            "cis": {"clip": "inf" if math.isinf(self.cis_clip) else self.cis_clip},
            "horizon": self.horizon,
            "master_seed": self.master_seed,
        }
        for method, over in sorted(self.method_thresholds.items()):
            doc[f"thresholds_{method}"] = dict(over)
        if self.full_scale:
            doc["full_scale"] = dict(self.full_scale)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "SweepConfig":
        domain = dict(doc["domain"])
        name = domain.pop("name")
        overrides = {}
        for key, val in doc.items():
            if key.startswith("thresholds_"):
                overrides[key[len("thresholds_"):]] = dict(val)
        clip = doc.get("cis", {}).get("clip", 100.0)
        return cls(
            domain_name=name,
            domain_params=domain,
            behavior=dict(doc.get("behavior", {"kind": "uniform"})),
            target=dict(doc.get("target", {"kind": "planned", "eps_floor": 0.05})),
            methods=tuple(doc.get("methods", list(KNOWN_METHODS))),
            h_grid=tuple(int(h) for h in doc.get("H_grid", (10, 100, 1000))),
            trials=int(doc.get("trials", 20)),
            thresholds=dict(doc.get("thresholds", {"eps": 0.2, "delta1": 0.1, "c2": 0.0})),
            method_thresholds=overrides,
            eval_rollouts=int(doc.get("rollouts", {}).get("eval", 2000)),
            truth_rollouts=int(doc.get("rollouts", {}).get("truth", 100000)),
            mfmc_k=int(doc.get("mfmc", {}).get("k", 1)),
            cis_clip=math.inf if clip == "inf" else float(clip),
            horizon=doc.get("horizon"),
            master_seed=int(doc.get("master_seed", 20240601)),
            full_scale=dict(doc.get("full_scale", {})),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def loads(cls, text: str) -> "SweepConfig":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "SweepConfig":
        return cls.loads(Path(path).read_text())

    def at_full_scale(self) -> "SweepConfig":
        """Apply the paper-scale protocol overrides stored in full_scale."""
        if not self.full_scale:
            return self
        doc = self.to_dict()
        doc.pop("full_scale")
        for key, val in self.full_scale.items():
            doc[key] = val
        return SweepConfig.from_dict(doc)


def build_policy(spec: dict, mdp: FactoredMdp) -> Policy:
    """Instantiate a policy from its config spec on a concrete domain."""
    kind = spec.get("kind", "uniform")
    eps = float(spec.get("eps_floor", 0.0))
    if kind == "uniform":
        return Policy.uniform(mdp.n_actions)
    if kind == "planned":
        return plan_target_policy(mdp, eps)
    if kind == "myopic":
        return myopic_target_policy(mdp, eps)
    if kind == "constant":
        from .fmdp import epsilon_floor
        return epsilon_floor(Policy.constant(mdp.n_actions, int(spec["action"])), eps)
    raise ValueError(f"unknown policy kind {kind!r}")


def _domain_for_trial(config: SweepConfig, trial: int) -> tuple[FactoredMdp, str]:
    """Domain instance plus a cache key: fixed domains share one instance."""
    params = dict(config.domain_params)
    if config.domain_name == "random-fmdp" and "seed" not in params:
        params["seed"] = spawn_seed(config.master_seed, "domain", trial)
        return make_domain(config.domain_name, **params), f"trial-{trial}"
    return make_domain(config.domain_name, **params), "fixed"


def _truth(config: SweepConfig, mdp: FactoredMdp, target: Policy,
           trial_key: str) -> tuple[float, float]:
    horizon = config.horizon
    if mdp.n_states <= ENUM_GUARD:
        return exact_value(mdp, target, horizon), 0.0
    seed = spawn_seed(config.master_seed, "truth", trial_key)
    return monte_carlo_value(mdp, target, config.truth_rollouts, seed, horizon)


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return repr(value)
    return str(value)


def _run_method(method: str, config: SweepConfig, mdp: FactoredMdp,
                batch, target: Policy, behavior: Policy,
                seed: int) -> tuple[EvalResult | None, str]:
    horizon = config.horizon
    th = config.thresholds_for(method)
    eps, delta1, c2 = th["eps"], th["delta1"], th.get("c2", 0.0)
    try:
        if method == "gscope":
            phi = learn_structure(batch, eps, delta1, c2, mdp.gamma, mdp.n_actions)
            model = build_model(batch, phi, eps, delta1, c2,
                                gamma=mdp.gamma, n_actions=mdp.n_actions)
            res = evaluate_model_based(model, mdp, target, config.eval_rollouts,
                                       seed, horizon, method="gscope")
            res.diagnostics["phi_sizes"] = [len(p) for p in phi]
            return res, "ok"
        if method == "ks":
            return evaluate_known_structure(batch, mdp, mdp.parents, eps, delta1,
                                            target, config.eval_rollouts, seed,
                                            horizon, c2), "ok"
        if method == "flat":
            return evaluate_flat(batch, mdp, target, config.eval_rollouts, seed,
                                 horizon), "ok"
        if method == "mfmc":
            return evaluate_mfmc(batch, target, config.mfmc_k, seed,
                                 gamma=mdp.gamma, n_actions=mdp.n_actions,
                                 horizon=horizon), "ok"
        if method == "cis":
            return evaluate_cis(batch, target, behavior, config.cis_clip), "ok"
        raise ValueError(f"unknown method {method!r}")
    except StateSpaceTooLarge:
        return None, "refused"


def prepare_truths(config: SweepConfig) -> dict[str, tuple[float, float]]:
    """Reference value per domain instance, computed once per sweep."""
    out: dict[str, tuple[float, float]] = {}
    for trial in range(config.trials):
        mdp, trial_key = _domain_for_trial(config, trial)
        if trial_key in out:
            continue
        target = build_policy(config.target, mdp)
        out[trial_key] = _truth(config, mdp, target, trial_key)
    return out


def run_trial_group(config: SweepConfig, h: int, trial: int,
                    truths: dict[str, tuple[float, float]] | None = None) -> list[dict]:
    """All method rows for one (H, trial) cell group; pure given the config."""
    mdp, trial_key = _domain_for_trial(config, trial)
    behavior = build_policy(config.behavior, mdp)
    target = build_policy(config.target, mdp)
    if truths is not None and trial_key in truths:
        truth, truth_stderr = truths[trial_key]
    else:
        truth, truth_stderr = _truth(config, mdp, target, trial_key)
    batch_seed = spawn_seed(config.master_seed, "batch", h, trial)
    batch = sample_batch(mdp, behavior, h, batch_seed, config.horizon)
    rows = []
    for method in config.methods:
        seed = spawn_seed(config.master_seed, "eval", method, h, trial)
        res, status = _run_method(method, config, mdp, batch, target, behavior, seed)
        row = {
            "method": method,
            "domain": config.domain_name,
            "H": h,
            "trial": trial,
            "seed": seed,
            "estimate": res.estimate if res else None,
            "stderr": res.stderr if res else None,
            "truth": truth,
            "truth_stderr": truth_stderr,
            "normalized_error": None,
            "status": status,
            "diagnostics": json.dumps(res.diagnostics if res else {}, sort_keys=True),
        }
        if res is not None:
            if abs(truth) <= 1e-12:
                row["status"] = "undefined_truth"
            else:
                row["normalized_error"] = normalized_error(res.estimate, truth)
        rows.append(row)
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    """Render sorted rows to the documented CSV schema, byte-deterministic."""
    ordered = sorted(rows, key=lambda r: (r["method"], r["H"], r["trial"]))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in ordered:
        writer.writerow([_format(row[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def summarize(rows: list[dict], truths: dict[str, dict] | None = None) -> dict:
    """Per-(method, H) quartiles of the normalized error over ok rows."""
    cells: dict[str, dict[str, dict]] = {}
    groups: dict[tuple[str, int], list[float]] = {}
    for row in rows:
        key = (row["method"], int(row["H"]))
        if row["status"] == "ok" and row["normalized_error"] is not None:
            groups.setdefault(key, []).append(float(row["normalized_error"]))
        else:
            groups.setdefault(key, [])
    for (method, h), errs in sorted(groups.items()):
        entry = cells.setdefault(method, {})
        if errs:
            q1, med, q3 = np.percentile(errs, [25, 50, 75])
            entry[str(h)] = {"median": float(med), "q1": float(q1),
                             "q3": float(q3), "n": len(errs)}
        else:
            entry[str(h)] = {"median": None, "q1": None, "q3": None, "n": 0}
    out = {"cells": cells}
    if truths is not None:
        out["truth"] = truths
    return out


def run_sweep(config: SweepConfig, out_dir=None, workers: int = 1):
    """Execute every (H, trial) cell group, write rows.csv and summary.json."""
    truth_cache = prepare_truths(config)
    jobs = [(h, trial) for h in config.h_grid for trial in range(config.trials)]
    rows: list[dict] = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for chunk in pool.map(_run_group_star,
                                  [(config, h, t, truth_cache) for (h, t) in jobs]):
                rows.extend(chunk)
    else:
        for h, trial in jobs:
            rows.extend(run_trial_group(config, h, trial, truth_cache))
    truths = {key: {"value": val, "stderr": err}
              for key, (val, err) in sorted(truth_cache.items())}
    summary = summarize(rows, truths)
    summary["config"] = config.to_dict()
    csv_text = rows_to_csv(rows)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "rows.csv").write_text(csv_text)
        (out_dir / "summary.json").write_text(
            json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return rows, summary


def _run_group_star(args):
    config, h, trial, truths = args
    return run_trial_group(config, h, trial, truths)
