"""Command-line entry point: ``robopoll <subcommand> ...``.

Exit codes: 0 ok, 2 usage, 3 validation, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .baselines import BASELINES
from .core import ContractViolation, ScenarioConfig
from .dp import DEFAULT_CAPS, DPPolicy, load_table, monotonicity_violations, save_table, value_iteration
from .eaac import load_policy
from .evaluation import EvalReport, compare, evaluate, simulate
from .numerics import NumericError
from .ppo import TrainConfig, train
from .scenarios import (
    GRID,
    LAMBDA_MAX,
    LAMBDA_MIN,
    GenSpec,
    generated_scenario,
    load_scenario,
    save_scenario,
    validate_scenario,
)

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERIC = 0, 2, 3, 4
POLICIES = ("esl", "random", "dp", "eaac")

log = logging.getLogger("robopoll")


class UsageError(Exception):
    pass


def _write(path: str | None, text: str) -> None:
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def make_policy(args, cfg: ScenarioConfig):
    if args.policy in BASELINES:
        return BASELINES[args.policy](cfg)
    if args.policy == "dp":
        if args.table:
            table = load_table(args.table, cfg)
        else:
            table = value_iteration(cfg, DEFAULT_CAPS.get(cfg.name, 12))
        return DPPolicy(table, cfg)
    if args.policy == "eaac":
        if not args.ckpt:
            raise UsageError("policy eaac needs --ckpt PATH")
        return load_policy(args.ckpt, cfg)
    raise UsageError(f"unknown policy {args.policy!r}; choose from {', '.join(POLICIES)}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_scenario(args) -> int:
    spec = GenSpec(args.robots, args.queues, args.load, alpha=args.alpha, seed=args.seed)
    cfg = generated_scenario(spec, name=args.name, queue_cap=args.qmax, horizon=args.horizon)
    if args.out:
        save_scenario(cfg, args.out)
    print(f"{cfg.name}: M={cfg.M} N={cfg.N} total rate {sum(cfg.arrival_rates):.2f}", file=sys.stderr)
    if not args.out:
        from .scenarios import scenario_to_json

        sys.stdout.write(scenario_to_json(cfg))
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg_dict = json.loads(Path(args.scenario).read_text())
    v = validate_scenario(cfg_dict)
    sys.stdout.write(json.dumps({"errors": v.errors, "warnings": v.warnings}, indent=2, sort_keys=True) + "\n")
    return EXIT_OK if v.ok else EXIT_VALIDATION


def cmd_solve_dp(args) -> int:
    cfg = load_scenario(args.scenario)
    cap = args.cap or DEFAULT_CAPS.get(cfg.name, 12)
    table = value_iteration(cfg, cap, tol=args.tol, max_iters=args.max_iters, exhaustive=not args.full_actions)
    save_table(table, args.out)
    summary = {
        "scenario": cfg.name,
        "scenario_hash": cfg.scenario_hash(),
        "cap": cap,
        "states": int(table.values.size),
        "iterations": table.iterations,
        "residual": table.residual,
        "converged": table.converged,
        "value_at_empty": float(table.values[0]),
        "monotonicity_violations": monotonicity_violations(table, cfg),
    }
    _write(args.report, json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"solved {cfg.name}: {summary['states']} states, {table.iterations} sweeps, residual {table.residual:.2e}", file=sys.stderr)
    if not table.converged:
        return EXIT_NUMERIC
    return EXIT_VALIDATION if summary["monotonicity_violations"] else EXIT_OK


def cmd_train(args) -> int:
    cfg = load_scenario(args.scenario)
    tcfg = TrainConfig(
        lr=args.lr,
        clip_eps=args.clip,
        gae_lambda=args.gae_lambda,
        epochs=args.epochs,
        minibatch=args.minibatch,
        episodes=args.episodes,
        horizon=args.horizon or cfg.horizon,
        iterations=args.iters,
        seed=args.seed,
        beta=cfg.beta,
        checkpoint_every=args.checkpoint_every,
    )
    res = train(cfg, tcfg, args.out)
    last = res.curve[-1]["mean_cost"] if res.curve else float("nan")
    print(f"trained {tcfg.iterations} iterations; last rollout cost {last:.2f}; outputs in {args.out}", file=sys.stderr)
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = load_scenario(args.scenario)
    policy = make_policy(args, cfg)
    metrics, traj = simulate(cfg, policy, [args.seed], record=True, record_states=bool(args.trajectory))
    m = metrics[0]
    out = {"policy": policy.name, "scenario": cfg.name, **m.__dict__}
    _write(args.out, json.dumps(out, indent=2, sort_keys=True) + "\n")
    if args.trajectory:
        with open(args.trajectory, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t"] + [f"loc{r}" for r in range(cfg.M)] + [f"x{i}" for i in range(cfg.N)])
            for t in range(cfg.horizon):
                w.writerow([t, *traj.locs[0, t].tolist(), *traj.queues[0, t].tolist()])
    print(f"{policy.name}: discounted cost {m.discounted_cost:.4f}, mean queue {m.mean_queue_length:.4f}", file=sys.stderr)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = load_scenario(args.scenario)
    policy = make_policy(args, cfg)
    rep = evaluate(cfg, policy, runs=args.runs, base_seed=args.seed)
    _write(args.out, rep.to_json(timing=args.timing))
    print(rep.summary(), file=sys.stderr)
    return EXIT_OK


def cmd_compare(args) -> int:
    base = EvalReport.from_json(Path(args.base).read_text())
    chal = EvalReport.from_json(Path(args.chal).read_text())
    rep = compare(base, chal, paired=args.paired)
    _write(args.out, rep.to_json())
    print(rep.summary(), file=sys.stderr)
    return EXIT_OK


def rate_histogram(cfg: ScenarioConfig) -> list[tuple[str, int]]:
    """Queue counts per 0.05 grid value from LAMBDA_MIN to LAMBDA_MAX (off-grid rates round)."""
    n_bins = int(round(LAMBDA_MAX / GRID))
    counts = {round(GRID * k, 2): 0 for k in range(1, n_bins + 1)}
    for p in cfg.arrival_rates:
        key = round(GRID * max(1, min(n_bins, int(round(p / GRID)))), 2)
        counts[key] += 1
    return [(f"{k:.2f}", v) for k, v in counts.items()]


def cmd_plot_data(args) -> int:
    cfg = load_scenario(args.scenario)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"{cfg.name}_rate_histogram.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rate", "queues"])
        w.writerows(rate_histogram(cfg))
    if args.reports:
        with open(out / f"{cfg.name}_queue_comparison.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scenario", "policy", "mean_queue", "ci_queue", "mean_cost", "ci_cost"])
            for path in args.reports:
                r = EvalReport.from_json(Path(path).read_text())
                w.writerow([r.scenario, r.policy, repr(r.mean_queue), repr(r.ci_queue), repr(r.mean_cost), repr(r.ci_cost)])
    print(f"plot data written to {out}", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="robopoll", description="multi-robot polling scheduling lab")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scenario", help="generate an asymmetric scenario file")
    g.add_argument("--robots", type=int, required=True)
    g.add_argument("--queues", type=int, required=True)
    g.add_argument("--load", type=float, required=True)
    g.add_argument("--alpha", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--name")
    g.add_argument("--qmax", type=int, default=100)
    g.add_argument("--horizon", type=int, default=1000)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen_scenario)

    v = sub.add_parser("validate", help="validate a scenario file")
    v.add_argument("--scenario", required=True)
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_validate)

    d = sub.add_parser("solve-dp", help="exact value iteration on a truncated instance")
    d.add_argument("--scenario", required=True)
    d.add_argument("--cap", type=int)
    d.add_argument("--tol", type=float, default=1e-6)
    d.add_argument("--max-iters", type=int, default=20_000)
    d.add_argument("--full-actions", action="store_true", help="search all admissible actions, not only exhaustive ones")
    d.add_argument("--out", required=True)
    d.add_argument("--report")
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_solve_dp)

    t = sub.add_parser("train", help="train EA-AC with PPO")
    t.add_argument("--scenario", required=True)
    t.add_argument("--iters", type=int, required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--lr", type=float, default=7e-4)
    t.add_argument("--clip", type=float, default=0.2)
    t.add_argument("--gae-lambda", type=float, default=0.95)
    t.add_argument("--epochs", type=int, default=4)
    t.add_argument("--minibatch", type=int, default=256)
    t.add_argument("--episodes", type=int, default=8)
    t.add_argument("--horizon", type=int)
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.set_defaults(func=cmd_train)

    for name, fn, helptext in (
        ("simulate", cmd_simulate, "simulate one episode"),
        ("evaluate", cmd_evaluate, "replicated evaluation with 95%% CIs"),
    ):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--scenario", required=True)
        s.add_argument("--policy", required=True)
        s.add_argument("--ckpt")
        s.add_argument("--table")
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--out")
        if name == "simulate":
            s.add_argument("--trajectory")
        else:
            s.add_argument("--runs", type=int, default=500)
            s.add_argument("--timing", action="store_true", help="include wall-clock time in the report")
        s.set_defaults(func=fn)

    c = sub.add_parser("compare", help="compare two evaluation reports")
    c.add_argument("--base", required=True)
    c.add_argument("--chal", required=True)
    c.add_argument("--paired", action="store_true")
    c.add_argument("--out")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_compare)

    pd = sub.add_parser("plot-data", help="emit CSVs for rate histograms and queue-length comparisons")
    pd.add_argument("--scenario", required=True)
    pd.add_argument("--reports", nargs="*")
    pd.add_argument("--out", default=".")
    pd.add_argument("--seed", type=int, default=0)
    pd.set_defaults(func=cmd_plot_data)
    return p


def _fail(code: int, kind: str, msg: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": msg}) + "\n")
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        return _fail(EXIT_USAGE, "usage", str(exc))
    except NumericError as exc:
        return _fail(EXIT_NUMERIC, "numeric", str(exc))
    except (ContractViolation, FileNotFoundError, json.JSONDecodeError) as exc:
        return _fail(EXIT_VALIDATION, "validation", str(exc))
    except FloatingPointError as exc:
        return _fail(EXIT_NUMERIC, "numeric", str(exc))


cli_dispatch = main

if __name__ == "__main__":
    sys.exit(main())
