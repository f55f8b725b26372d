"""Command-line harness: domain generation, sampling, learning, evaluation,
sweeps, and theory reports.

Exit codes: 0 success, 1 usage error, 2 refused (operation infeasible for the
requested instance, e.g. a flat model above the enumeration guard).
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

from .domains import DOMAINS, make_domain
from .evaluators import normalized_error
from .fmdp import (FactoredMdp, StateSpaceTooLarge, TrajectoryBatch,
                   exact_value, monte_carlo_value, sample_batch)
from .gscope import LearnedModel, build_model, learn_structure
from .sweep import (SweepConfig, build_policy, rows_to_csv, run_sweep,
                    summarize, _run_method)
from .theory import (BoundInputs, check_assumptions, compute_psi,
                     theorem1_bound)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parse_policy_spec(text: str) -> dict:
    """'uniform' | 'planned:0.05' | 'myopic:0.05' | 'constant:2[:0.05]'."""
    parts = text.split(":")
    kind = parts[0]
    if kind == "uniform":
        return {"kind": "uniform"}
    if kind in ("planned", "myopic"):
        eps = float(parts[1]) if len(parts) > 1 else 0.0
        return {"kind": kind, "eps_floor": eps}
    if kind == "constant":
        if len(parts) < 2:
            raise UsageError("constant policy needs an action: constant:<a>[:eps]")
        spec = {"kind": "constant", "action": int(parts[1])}
        if len(parts) > 2:
            spec["eps_floor"] = float(parts[2])
        return spec
    raise UsageError(f"unknown policy spec {text!r}")


def _parse_params(pairs: list[str]) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise UsageError(f"--param expects key=value, got {pair!r}")
        key, val = pair.split("=", 1)
        try:
            out[key] = int(val)
        except ValueError:
            try:
                out[key] = float(val)
            except ValueError:
                out[key] = val
    return out


def _build_parser() -> _Parser:
    parser = _Parser(prog="factored-ope",
                     description="Factored-MDP off-policy evaluation benchmark")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-domain", help="write a domain model as JSON")
    p.add_argument("name", choices=sorted(DOMAINS))
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--param", action="append", default=[],
                   help="extra generator parameter key=value")

    p = sub.add_parser("sample", help="sample behavior trajectories to .npz")
    p.add_argument("--domain", required=True)
    p.add_argument("--policy", default="uniform")
    p.add_argument("--H", dest="n_traj", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("learn", help="learn structure + model from a batch")
    p.add_argument("--config", default=None,
                   help="JSON with domain/batch/eps/delta1/c2 keys; flags override")
    p.add_argument("--domain", default=None)
    p.add_argument("--batch", default=None)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--delta1", type=float, default=None)
    p.add_argument("--c2", type=float, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="run one estimator on a batch")
    p.add_argument("--method", required=True,
                   choices=["gscope", "ks", "flat", "mfmc", "cis"])
    p.add_argument("--domain", required=True)
    p.add_argument("--batch", required=True)
    p.add_argument("--model", default=None,
                   help="pre-learned model JSON (gscope only; skips learning)")
    p.add_argument("--target", default="uniform")
    p.add_argument("--behavior", default="uniform")
    p.add_argument("--eps", type=float, default=0.2)
    p.add_argument("--delta1", type=float, default=0.1)
    p.add_argument("--c2", type=float, default=0.0)
    p.add_argument("--rollouts", type=int, default=2000)
    p.add_argument("--clip", type=float, default=100.0)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", default=None)

    p = sub.add_parser("sweep", help="run a full sweep from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--full", action="store_true",
                   help="apply the config's paper-scale overrides")

    p = sub.add_parser("theory", help="theoretical quantities as JSON")
    tsub = p.add_subparsers(dest="theory_command", required=True)
    tp = tsub.add_parser("psi")
    tp.add_argument("--domain", required=True)
    tp.add_argument("--behavior", default="uniform")
    tp.add_argument("--target", default="uniform")
    tp.add_argument("--out", default=None)
    tp = tsub.add_parser("bound")
    tp.add_argument("--eps", type=float, required=True)
    tp.add_argument("--delta1", type=float, required=True)
    tp.add_argument("--horizon", type=int, required=True)
    tp.add_argument("--n-vars", type=int, required=True)
    tp.add_argument("--max-parents", type=int, required=True)
    tp.add_argument("--c2", type=float, default=0.0)
    tp.add_argument("--c3", type=float, default=0.0)
    tp.add_argument("--psi", type=float, nargs="+", required=True)
    tp.add_argument("--actions", type=int, required=True)
    tp.add_argument("--gamma", type=int, required=True)
    tp.add_argument("--out", default=None)
    tp = tsub.add_parser("assumptions")
    tp.add_argument("--domain", required=True)
    tp.add_argument("--policy", default="uniform")
    tp.add_argument("--out", default=None)

    p = sub.add_parser("report", help="summarize a rows.csv into summary JSON")
    p.add_argument("--rows", required=True)
    p.add_argument("--out", default=None)
    return parser


def _emit(doc, out_path):
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if out_path:
        Path(out_path).write_text(text)
    else:
        sys.stdout.write(text)


def _cmd_gen_domain(args) -> int:
    params = _parse_params(args.param)
    if args.seed is not None:
        params["seed"] = args.seed
    if args.horizon is not None:
        params["horizon"] = args.horizon
    mdp = make_domain(args.name, **params)
    mdp.save(args.out)
    return 0


def _cmd_sample(args) -> int:
    mdp = FactoredMdp.load(args.domain)
    policy = build_policy(_parse_policy_spec(args.policy), mdp)
    batch = sample_batch(mdp, policy, args.n_traj, args.seed, args.horizon)
    batch.save(args.out)
    return 0


def _cmd_learn(args) -> int:
    settings = {"c2": 0.0}
    if args.config:
        settings.update(json.loads(Path(args.config).read_text()))
    for key in ("domain", "batch", "eps", "delta1", "c2"):
        value = getattr(args, key)
        if value is not None:
            settings[key] = value
    missing = [k for k in ("domain", "batch", "eps", "delta1")
               if k not in settings]
    if missing:
        raise UsageError(f"learn needs {', '.join(missing)} (flags or --config)")
    mdp = FactoredMdp.load(settings["domain"])
    batch = TrajectoryBatch.load(settings["batch"])
    eps, delta1, c2 = (float(settings["eps"]), float(settings["delta1"]),
                       float(settings["c2"]))
    phi = learn_structure(batch, eps, delta1, c2, mdp.gamma, mdp.n_actions)
    model = build_model(batch, phi, eps, delta1, c2,
                        gamma=mdp.gamma, n_actions=mdp.n_actions)
    model.save(args.out)
    return 0


def _cmd_eval(args) -> int:
    from .evaluators import evaluate_model_based
    mdp = FactoredMdp.load(args.domain)
    batch = TrajectoryBatch.load(args.batch)
    target = build_policy(_parse_policy_spec(args.target), mdp)
    behavior = build_policy(_parse_policy_spec(args.behavior), mdp)
    config = SweepConfig(
        domain_name="file", methods=(args.method,),
        thresholds={"eps": args.eps, "delta1": args.delta1, "c2": args.c2},
        eval_rollouts=args.rollouts, cis_clip=args.clip, mfmc_k=args.k)
    if args.method == "gscope" and args.model:
        model = LearnedModel.load(args.model)
        res, status = evaluate_model_based(
            model, mdp, target, args.rollouts, args.seed), "ok"
    else:
        res, status = _run_method(args.method, config, mdp, batch, target,
                                  behavior, args.seed)
    truth, truth_stderr = (exact_value(mdp, target), 0.0) \
        if mdp.n_states <= 2 ** 16 else \
        monte_carlo_value(mdp, target, 100000, args.seed + 1)
    row = {
        "method": args.method, "domain": Path(args.domain).stem, "H": batch.n_traj,
        "trial": 0, "seed": args.seed,
        "estimate": res.estimate if res else None,
        "stderr": res.stderr if res else None,
        "truth": truth, "truth_stderr": truth_stderr,
        "normalized_error": (normalized_error(res.estimate, truth)
                             if res and abs(truth) > 1e-12 else None),
        "status": status,
        "diagnostics": json.dumps(res.diagnostics if res else {}, sort_keys=True),
    }
    text = rows_to_csv([row])
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0 if status == "ok" else 2


def _cmd_sweep(args) -> int:
    config = SweepConfig.load(args.config)
    if args.full:
        config = config.at_full_scale()
    run_sweep(config, out_dir=args.out, workers=args.workers)
    return 0


def _cmd_theory(args) -> int:
    if args.theory_command == "bound":
        res = theorem1_bound(BoundInputs(
            eps=args.eps, delta1=args.delta1, horizon=args.horizon,
            n_vars=args.n_vars, max_parents=args.max_parents, c2=args.c2,
            c3=args.c3, psi=tuple(args.psi), n_actions=args.actions,
            gamma=args.gamma))
        doc = {k: ("inf" if isinstance(v, float) and math.isinf(v) else v)
               for k, v in res.__dict__.items()}
        _emit(doc, args.out)
        return 0
    mdp = FactoredMdp.load(args.domain)
    if args.theory_command == "psi":
        behavior = build_policy(_parse_policy_spec(args.behavior), mdp)
        target = build_policy(_parse_policy_spec(args.target), mdp)
        psi = compute_psi(mdp, behavior, target)
        _emit({"psi": ["inf" if math.isinf(p) else float(p) for p in psi]},
              args.out)
        return 0
    if args.theory_command == "assumptions":
        policy = build_policy(_parse_policy_spec(args.policy), mdp)
        report = check_assumptions(mdp, policy)
        _emit(report.to_dict(), args.out)
        return 0
    raise UsageError("unknown theory subcommand")


def _cmd_report(args) -> int:
    rows = []
    import csv as _csv
    with open(args.rows) as fh:
        for record in _csv.DictReader(fh):
            record["H"] = int(record["H"])
            record["normalized_error"] = (float(record["normalized_error"])
                                          if record["normalized_error"] else None)
            rows.append(record)
    _emit(summarize(rows), args.out)
    return 0


_COMMANDS = {
    "gen-domain": _cmd_gen_domain,
    "sample": _cmd_sample,
    "learn": _cmd_learn,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "theory": _cmd_theory,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except StateSpaceTooLarge as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
