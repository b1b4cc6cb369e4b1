"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Budgets (training iterations, evaluation runs, DP caps) live in
``acceptance_budget.json`` next to this file.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from robopoll.baselines import esl_policy, feasible_targets, random_policy
from robopoll.cli import main as cli_main
from robopoll.core import (
    DOMAIN_EVAL,
    DOMAIN_POLICY,
    Convention,
    ScenarioConfig,
    arrival_schedule,
    busy_mask,
    step_batch,
    substream,
)
from robopoll.dp import DPPolicy, bellman_residual, value_iteration
from robopoll.eaac import EAACPolicy, init_params
from robopoll.evaluation import compare, evaluate
from robopoll.numerics import Tensor, masked_log_softmax
from robopoll.ppo import TrainConfig, compute_gae, train
from robopoll.scenarios import GenSpec, generate_units, generated_scenario, load_scenario

from acceptance_log import record
from gradcheck import eaac_directional_errors

BUDGET = json.loads((Path(__file__).with_name("acceptance_budget.json")).read_text())
RUNS = BUDGET["eval_runs"]
BASE = BUDGET["eval_base_seed"]

REFERENCE = {
    # scenario: (cost mean, cost CI, queue mean, queue CI)
    "s1": (405.8574, 8.68, 1.5895, 0.0211),
    "s2": (322.3632, 6.27, 0.8875, 0.0102),
    "s3": (397.0253, 5.15, 1.0320, 0.0065),
}
ESL_S1 = (410.51, 8.67, 1.6133, 0.0214)
SOLVE_LIMIT = {"s1": 60.0, "s2": 900.0, "s3": 900.0}


@pytest.fixture
def emit(capsys):
    def _emit(criterion: int, ok: bool, detail: str) -> None:
        line = record(criterion, ok, detail)
        with capsys.disabled():
            print("\n" + line)

    return _emit


def overlaps(m1, h1, m2, h2) -> bool:
    return abs(m1 - m2) <= h1 + h2


@pytest.fixture(scope="module")
def dp_tables():
    cache = {}

    def get(name):
        if name not in cache:
            cfg = load_scenario(name)
            t0 = time.perf_counter()
            table = value_iteration(cfg, BUDGET["dp_caps"][name], tol=BUDGET["dp_tol"])
            cache[name] = (cfg, table, time.perf_counter() - t0)
        return cache[name]

    return get


@pytest.fixture(scope="module")
def dp_reports(dp_tables):
    cache = {}

    def get(name):
        if name not in cache:
            cfg, table, _ = dp_tables(name)
            cache[name] = evaluate(cfg, DPPolicy(table, cfg), runs=RUNS, base_seed=BASE)
        return cache[name]

    return get


# ---------------------------------------------------------------------------
# 1-3: exact optimal policies


@pytest.mark.parametrize("criterion,name", [(1, "s1"), (2, "s2"), (3, "s3")])
def test_dp_optimal_matches_reference(criterion, name, dp_tables, dp_reports, emit):
    cfg, table, solve_s = dp_tables(name)
    t0 = time.perf_counter()
    rep = dp_reports(name)
    eval_s = time.perf_counter() - t0
    c, hc, q, hq = REFERENCE[name]
    ok_cost = overlaps(rep.mean_cost, rep.ci_cost, c, hc)
    ok_queue = overlaps(rep.mean_queue, rep.ci_queue, q, hq)
    ok_time = solve_s < SOLVE_LIMIT[name]
    ok = table.converged and ok_cost and ok_queue and ok_time
    emit(
        criterion,
        ok,
        f"{name} DP cap {table.cap}: cost {rep.mean_cost:.2f}+/-{rep.ci_cost:.2f} (ref {c}+/-{hc}), "
        f"queue {rep.mean_queue:.4f}+/-{rep.ci_queue:.4f} (ref {q}+/-{hq}), solve {solve_s:.0f}s, eval {eval_s:.1f}s",
    )
    assert ok


# ---------------------------------------------------------------------------
# 4: ESL on S1


def test_esl_s1_matches_reference(emit):
    cfg = load_scenario("s1")
    rep = evaluate(cfg, esl_policy(cfg), runs=RUNS, base_seed=BASE)
    c, hc, q, hq = ESL_S1
    ok = overlaps(rep.mean_cost, rep.ci_cost, c, hc) and overlaps(rep.mean_queue, rep.ci_queue, q, hq)
    emit(
        4,
        ok,
        f"s1 ESL: cost {rep.mean_cost:.2f}+/-{rep.ci_cost:.2f} (ref {c}+/-{hc}), "
        f"queue {rep.mean_queue:.4f}+/-{rep.ci_queue:.4f} (ref {q}+/-{hq})",
    )
    assert ok


# ---------------------------------------------------------------------------
# 5: trained EA-AC near-optimal on S1


def test_eaac_near_optimal_s1(dp_reports, emit, tmp_path):
    cfg = load_scenario("s1")
    dp = dp_reports("s1")
    budget = BUDGET["s1_training"]
    ratios = []
    t0 = time.perf_counter()
    for seed in budget["seeds"]:
        res = train(cfg, TrainConfig(iterations=budget["iterations"], seed=seed, horizon=cfg.horizon))
        rep = evaluate(cfg, EAACPolicy(cfg, res.params), runs=RUNS, base_seed=BASE)
        assert (rep.base_seed, rep.runs) == (dp.base_seed, dp.runs)  # paired seeds
        ratios.append(rep.mean_cost / dp.mean_cost)
    best = min(ratios)
    ok = best <= 1.02
    emit(
        5,
        ok,
        f"s1 EA-AC/DP cost ratio per seed {[round(r, 4) for r in ratios]}, best {best:.4f} (limit 1.02), "
        f"{budget['iterations']} iterations x {len(ratios)} seeds in {time.perf_counter() - t0:.0f}s",
    )
    assert ok


# ---------------------------------------------------------------------------
# 6: EA-AC beats ESL on a generated asymmetric scenario


def test_eaac_beats_esl_asymmetric(emit):
    b = BUDGET["asymmetric"]
    cfg = generated_scenario(GenSpec(b["robots"], b["queues"], b["load"], seed=b["scenario_seed"]))
    t0 = time.perf_counter()
    res = train(cfg, TrainConfig(iterations=b["iterations"], seed=b["train_seed"], horizon=cfg.horizon))
    train_s = time.perf_counter() - t0
    esl = evaluate(cfg, esl_policy(cfg), runs=RUNS, base_seed=BASE)
    ea = evaluate(cfg, EAACPolicy(cfg, res.params), runs=RUNS, base_seed=BASE)
    cmp = compare(esl, ea, paired=True)
    ok = cmp.paired_cost_diff > cmp.paired_cost_ci
    emit(
        6,
        ok,
        f"{cfg.name}: ESL {esl.mean_cost:.2f}, EA-AC {ea.mean_cost:.2f}, reduction {cmp.cost_reduction_pct:.2f}%, "
        f"paired diff {cmp.paired_cost_diff:.2f}+/-{cmp.paired_cost_ci:.2f}, training {train_s:.0f}s",
    )
    assert ok


# ---------------------------------------------------------------------------
# 7: invariants over simulated slots


def _invariant_run(cfg: ScenarioConfig, policy, R: int, seed: int) -> tuple[int, dict]:
    """Simulate ``R`` episodes, checking every slot with plain array logic."""
    T, M, N = cfg.horizon, cfg.M, cfg.N
    arrivals = np.stack([arrival_schedule(cfg.rates, seed + k, T, DOMAIN_EVAL) for k in range(R)], axis=1)
    rng = substream(seed, DOMAIN_POLICY, 77)
    locs = np.tile(np.arange(M), (R, 1))
    queues = np.zeros((R, N), dtype=np.int64)
    v = {"occupancy": 0, "exhaustive": 0, "flow": 0, "feasible_set": 0}
    rows = np.arange(R)
    for t in range(T):
        busy = busy_mask(locs, queues)
        # every idle robot has a nonempty feasible set at any point of sequential decoding
        dest_probe = locs.copy()
        for r in range(M):
            ok = feasible_targets(locs, busy, dest_probe, r, N, cfg.convention)
            v["feasible_set"] += int(np.sum(~ok.any(axis=1)))
        dest, serve = policy.act_batch(locs, queues, rng)
        v["exhaustive"] += int(np.sum(busy & ~(serve & (dest == locs))))
        v["exhaustive"] += int(np.sum(serve & ~busy))
        occ_next = np.zeros((R, N), dtype=np.int64)
        np.add.at(occ_next, (np.repeat(rows, M), dest.ravel()), 1)
        v["occupancy"] += int(np.sum(occ_next.max(axis=1) > 1))
        if cfg.convention is Convention.CONSERVATIVE:
            here = np.zeros((R, N), dtype=bool)
            here[np.repeat(rows, M), locs.ravel()] = True
            moved = dest != locs
            v["occupancy"] += int(np.sum(here[np.repeat(rows, M), dest.ravel()].reshape(R, M) & moved))
        new_locs, new_q, hits = step_batch(locs, queues, dest, serve, arrivals[t], cfg.queue_cap)
        served = np.zeros((R, N), dtype=np.int64)
        flat = serve.ravel()
        np.add.at(served, (np.repeat(rows, M)[flat], locs.ravel()[flat]), 1)
        expected = queues - served + arrivals[t] - hits
        v["flow"] += int(np.sum(expected != new_q)) + int(np.sum(new_q < 0))
        locs, queues = new_locs, new_q
    return R * T, v


def test_invariants_over_a_million_slots(emit):
    target = BUDGET["invariant_slots"]
    scenarios = [
        ScenarioConfig(1, 3, (0.1, 0.25, 0.45), name="s1"),
        ScenarioConfig(2, 4, (0.15, 0.25, 0.5, 0.6), name="s3"),
        ScenarioConfig(3, 7, (0.3,) * 7, queue_cap=8, name="m3n7-cap"),
        ScenarioConfig(3, 5, (0.2, 0.3, 0.1, 0.5, 0.4), convention=Convention.LOOSE, name="m3n5-loose"),
        ScenarioConfig(4, 4, (0.5, 0.6, 0.7, 0.8), name="m4n4-full"),
    ]
    slots, totals = 0, {}
    k = 0
    while slots < target:
        cfg = scenarios[k % len(scenarios)]
        if k % 3 == 2:
            pol = EAACPolicy(cfg, init_params(cfg, np.random.default_rng(k)), mode="sample")
        elif k % 3 == 1:
            pol = esl_policy(cfg)
        else:
            pol = random_policy(cfg)
        n, v = _invariant_run(cfg, pol, R=100, seed=1000 * k)
        slots += n
        for key, val in v.items():
            totals[key] = totals.get(key, 0) + val
        k += 1
    ok = all(val == 0 for val in totals.values())
    emit(7, ok, f"{slots} slots over {k} batches: violations {totals}")
    assert ok


# ---------------------------------------------------------------------------
# 8: numeric oracles


def _gae_loop(r, v, b, beta, lam):
    vv = list(v) + [b]
    return np.array(
        [sum((beta * lam) ** l * (r[t + l] + beta * vv[t + l + 1] - vv[t + l]) for l in range(len(r) - t)) for t in range(len(r))]
    )


def test_numeric_oracles(dp_tables, emit):
    notes, ok = [], True
    cfg = ScenarioConfig(3, 6, (0.05, 0.1, 0.2, 0.3, 0.45, 0.6), queue_cap=20)
    worst = eaac_directional_errors(cfg, n_states=100, seed=8)
    ok &= worst["actor"] <= 1e-4 and worst["critic"] <= 1e-4
    notes.append(f"grad rel err actor {worst['actor']:.1e} critic {worst['critic']:.1e}")

    rng = np.random.default_rng(1)
    gae_err = 0.0
    for _ in range(20):
        T = int(rng.integers(5, 60))
        r, v, b = rng.normal(size=T), rng.normal(size=T), float(rng.normal())
        adv, _ = compute_gae(r[:, None], v[:, None], np.array([b]), 0.99, 0.95)
        gae_err = max(gae_err, float(np.max(np.abs(adv[:, 0] - _gae_loop(r, v, b, 0.99, 0.95)))))
    ok &= gae_err <= 1e-10
    notes.append(f"GAE err {gae_err:.1e}")

    shift_err = 0.0
    for _ in range(100):
        x = rng.normal(size=(4, 9)) * 5
        mask = rng.random((4, 9)) < 0.6
        mask[:, 0] = True
        base = masked_log_softmax(Tensor(x), mask).data
        moved = masked_log_softmax(Tensor(x + rng.normal() * 10), mask).data
        shift_err = max(shift_err, float(np.max(np.abs(base[mask] - moved[mask]))))
    ok &= shift_err <= 1e-12
    notes.append(f"softmax shift err {shift_err:.1e}")

    s1cfg, table, _ = dp_tables("s1")
    res = bellman_residual(table, s1cfg)
    ok &= res <= 1e-6
    notes.append(f"S1 Bellman residual {res:.1e}")

    p, beta = 0.5, 0.99
    chain = ScenarioConfig(1, 1, (p,), beta=beta, horizon=1000)
    ct = value_iteration(chain, 4, tol=1e-10)
    closed = p * beta / (1 - beta)
    sim = evaluate(chain, DPPolicy(ct, chain), runs=RUNS, base_seed=BASE)
    ok &= abs(ct.values[0] - closed) <= 1e-6 and abs(sim.mean_cost - closed) <= sim.ci_cost
    notes.append(f"chain V_dp {ct.values[0]:.6f}, V_sim {sim.mean_cost:.3f}+/-{sim.ci_cost:.3f}, closed form {closed}")
    emit(8, bool(ok), "; ".join(notes))
    assert ok


# ---------------------------------------------------------------------------
# 9: scenario generation exactness


def test_generation_exact_over_grid(emit):
    rng = np.random.default_rng(99)
    grid = [(m, n, rho) for m in (1, 2, 3, 4, 6) for n in (m, 2 * m, 4 * m, 8 * m, 12) for rho in (0.3, 0.5, 0.75, 0.9) if n >= m]
    made, violations, skipped = 0, 0, 0
    while made < BUDGET["generated_scenarios"]:
        m, n, rho = grid[int(rng.integers(len(grid)))]
        alpha = float(rng.choice([0.2, 0.5, 1.0, 3.0]))
        spec = GenSpec(m, n, rho, alpha=alpha, seed=int(rng.integers(2**31)))
        try:
            spec.check()
        except Exception:
            skipped += 1
            continue
        u = generate_units(spec)
        cfg = generated_scenario(spec)
        rates = np.array(cfg.arrival_rates)
        bad = (
            int(u.sum()) != round(m * rho * 20)
            or u.min() < 1
            or u.max() > math.floor(min(0.6, rho) * 20 + 1e-9)
            or np.any(np.abs(rates * 20 - np.round(rates * 20)) > 1e-12)
            or not np.array_equal(np.round(rates * 20).astype(int), u)
        )
        violations += int(bad)
        made += 1
    ok = violations == 0
    emit(9, ok, f"{made} generated scenarios ({skipped} infeasible grid points skipped), {violations} violations")
    assert ok


# ---------------------------------------------------------------------------
# 10: determinism of CLI outputs


def _cli_outputs(root: Path, capsys) -> dict[str, bytes]:
    root.mkdir()

    def run(*args):
        rc = cli_main([str(a) for a in args])
        assert rc == 0, args

    scen = root / "scen.json"
    run("gen-scenario", "--robots", 2, "--queues", 6, "--load", 0.7, "--seed", 5, "--horizon", 120, "--out", scen)
    capsys.readouterr()
    run("validate", "--scenario", scen)
    validate_out = capsys.readouterr().out.encode()
    run("solve-dp", "--scenario", "s1", "--cap", 6, "--out", root / "t.bin", "--report", root / "dp.json")
    run("train", "--scenario", scen, "--iters", 2, "--horizon", 60, "--episodes", 2, "--minibatch", 60, "--seed", 4, "--out", root / "run")
    run("evaluate", "--scenario", scen, "--policy", "esl", "--runs", 30, "--seed", 9, "--out", root / "esl.json")
    run("evaluate", "--scenario", scen, "--policy", "random", "--runs", 30, "--seed", 9, "--out", root / "rnd.json")
    run("evaluate", "--scenario", scen, "--policy", "eaac", "--ckpt", root / "run" / "final.bin", "--runs", 30, "--seed", 9, "--out", root / "ea.json")
    run("evaluate", "--scenario", "s1", "--policy", "dp", "--table", root / "t.bin", "--runs", 30, "--seed", 9, "--out", root / "dp_eval.json")
    run("simulate", "--scenario", scen, "--policy", "random", "--seed", 3, "--out", root / "sim.json", "--trajectory", root / "traj.csv")
    run("compare", "--base", root / "rnd.json", "--chal", root / "esl.json", "--paired", "--out", root / "cmp.json")
    run("plot-data", "--scenario", scen, "--reports", root / "esl.json", root / "rnd.json", "--out", root / "plots")
    files = {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
    files["<validate stdout>"] = validate_out
    return files


def test_cli_determinism(tmp_path, capsys, emit):
    a = _cli_outputs(tmp_path / "a", capsys)
    b = _cli_outputs(tmp_path / "b", capsys)
    differing = sorted(k for k in a if a[k] != b.get(k)) + sorted(set(b) - set(a))
    ok = not differing
    emit(10, ok, f"{len(a)} machine-readable outputs from 8 subcommands compared byte for byte; differing: {differing or 'none'}")
    assert ok


def test_invariant_checker_detects_faults():
    """The slot checker above must flag a policy that breaks the rules."""
    cfg = ScenarioConfig(2, 3, (0.5, 0.5, 0.5), horizon=50)

    class Lazy:
        def act_batch(self, locs, queues, rng=None):
            return locs.copy(), np.zeros(locs.shape, dtype=bool)  # never serves

    class Crowd:
        def act_batch(self, locs, queues, rng=None):
            return np.zeros_like(locs), np.zeros(locs.shape, dtype=bool)  # everyone to queue 0

    _, v = _invariant_run(cfg, Lazy(), R=5, seed=0)
    assert v["exhaustive"] > 0
    _, v = _invariant_run(cfg, Crowd(), R=5, seed=0)
    assert v["occupancy"] > 0
