"""Replicated simulation, metrics with 95% confidence intervals, comparisons.

Episodes start from the empty system with robot ``r`` at queue ``r`` and
run ``cfg.horizon`` slots. Run ``k`` of an evaluation uses seed
``base_seed + k``; its arrivals come from per-queue substreams of that seed,
so two policies evaluated with the same base seed face identical arrivals.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .baselines import Policy
from .core import (
    DOMAIN_EVAL,
    DOMAIN_POLICY,
    ContractViolation,
    ScenarioConfig,
    arrival_schedule,
    check_batch,
    step_batch,
    substream,
)

REPORT_SCHEMA = "robopoll.eval-report/1"
COMPARISON_SCHEMA = "robopoll.comparison/1"
CAP_WARNING_FRACTION = 1e-3
Z95 = 1.96


@dataclass
class EpisodeMetrics:
    discounted_cost: float
    mean_queue_length: float
    cap_hit_count: int
    seed: int


@dataclass
class Trajectory:
    """Optional per-slot record of a batch of episodes."""

    totals: np.ndarray  # (R, T) sum of queue lengths at slot start
    queues: np.ndarray | None = None  # (R, T, N)
    locs: np.ndarray | None = None  # (R, T, M)


def discounted_cost(totals: np.ndarray, beta: float) -> np.ndarray:
    T = totals.shape[-1]
    return totals @ (beta ** np.arange(T))


def simulate(
    cfg: ScenarioConfig,
    policy: Policy,
    seeds,
    domain: int = DOMAIN_EVAL,
    validate: bool = True,
    record: bool = False,
    record_states: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[list[EpisodeMetrics], Trajectory | None]:
    """Run one episode per seed in lockstep; metrics are streamed per slot."""
    seeds = [int(s) for s in seeds]
    R, M, N, T = len(seeds), cfg.M, cfg.N, cfg.horizon
    if policy.cfg.M != M or policy.cfg.N != N:
        raise ContractViolation("policy dimensions do not match the scenario")
    arrivals = np.stack([arrival_schedule(cfg.rates, s, T, domain) for s in seeds], axis=1)  # (T, R, N)
    if rng is None:
        rng = substream(seeds[0] if seeds else 0, DOMAIN_POLICY, R)
    locs = np.tile(np.arange(M, dtype=np.int64), (R, 1))
    queues = np.zeros((R, N), dtype=np.int64)
    cost = np.zeros(R)
    qsum = np.zeros(R)
    hits = np.zeros(R, dtype=np.int64)
    disc = 1.0
    totals = np.empty((R, T)) if record else None
    qrec = np.empty((R, T, N), dtype=np.int64) if record_states else None
    lrec = np.empty((R, T, M), dtype=np.int64) if record_states else None
    for t in range(T):
        tot = queues.sum(axis=1)
        cost += disc * tot
        qsum += tot
        disc *= cfg.beta
        if record:
            totals[:, t] = tot
        if record_states:
            qrec[:, t] = queues
            lrec[:, t] = locs
        dest, serve = policy.act_batch(locs, queues, rng)
        if validate:
            check_batch(locs, queues, dest, serve, cfg.convention, exhaustive=policy.exhaustive)
        locs, queues, hit = step_batch(locs, queues, dest, serve, arrivals[t], cfg.queue_cap)
        hits += hit.sum(axis=1)
    metrics = [
        EpisodeMetrics(float(cost[k]), float(qsum[k] / (T * N)), int(hits[k]), seeds[k]) for k in range(R)
    ]
    traj = Trajectory(totals, qrec, lrec) if record else None
    return metrics, traj


def run_episode(cfg: ScenarioConfig, policy: Policy, seed: int, **kw) -> EpisodeMetrics:
    return simulate(cfg, policy, [seed], **kw)[0][0]


def mean_ci(values) -> tuple[float, float]:
    """Mean and normal-approximation 95% half-width ``1.96 s / sqrt(n)``."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise ContractViolation("a confidence interval needs at least two runs")
    return float(v.mean()), float(Z95 * v.std(ddof=1) / math.sqrt(v.size))


@dataclass
class EvalReport:
    policy: str
    scenario: str
    scenario_hash: str
    runs: int
    base_seed: int
    horizon: int
    mean_cost: float
    ci_cost: float
    mean_queue: float
    ci_queue: float
    cap_hit_fraction: float
    costs: list[float] = field(repr=False)
    queue_lengths: list[float] = field(repr=False)
    warnings: list[str] = field(default_factory=list)
    wall_clock: float | None = None

    def to_dict(self, timing: bool = False) -> dict:
        d = asdict(self)
        d["schema"] = REPORT_SCHEMA
        if not timing:
            d.pop("wall_clock")
        return d

    def to_json(self, timing: bool = False) -> str:
        return json.dumps(self.to_dict(timing), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        if d.pop("schema", None) != REPORT_SCHEMA:
            raise ContractViolation("not an evaluation report of a supported schema")
        return cls(**d)

    def summary(self) -> str:
        lines = [
            f"policy {self.policy} on {self.scenario}: {self.runs} runs, T={self.horizon}, seeds {self.base_seed}..{self.base_seed + self.runs - 1}",
            f"  discounted cost    {self.mean_cost:12.4f} +/- {self.ci_cost:.4f}",
            f"  mean queue length  {self.mean_queue:12.4f} +/- {self.ci_queue:.4f}",
            f"  cap-hit fraction   {self.cap_hit_fraction:12.3g}",
        ]
        if self.wall_clock is not None:
            lines.append(f"  wall clock         {self.wall_clock:10.2f} s")
        lines += [f"  warning: {w}" for w in self.warnings]
        return "\n".join(lines)


def evaluate(
    cfg: ScenarioConfig,
    policy: Policy,
    runs: int = 500,
    base_seed: int = 0,
    batch: int = 500,
    validate: bool = True,
) -> EvalReport:
    if runs < 2:
        raise ContractViolation("evaluate needs runs >= 2")
    t0 = time.perf_counter()
    metrics: list[EpisodeMetrics] = []
    seeds = list(range(base_seed, base_seed + runs))
    for k in range(0, runs, batch):
        metrics += simulate(cfg, policy, seeds[k : k + batch], validate=validate)[0]
    costs = [m.discounted_cost for m in metrics]
    qlens = [m.mean_queue_length for m in metrics]
    mc, cc = mean_ci(costs)
    mq, cq = mean_ci(qlens)
    slots = runs * cfg.horizon
    frac = sum(m.cap_hit_count for m in metrics) / slots
    warnings = []
    if frac > CAP_WARNING_FRACTION:
        warnings.append(f"cap-hit fraction {frac:.3g} exceeds {CAP_WARNING_FRACTION:g}; raise qmax")
    return EvalReport(
        policy=policy.name,
        scenario=cfg.name,
        scenario_hash=cfg.scenario_hash(),
        runs=runs,
        base_seed=base_seed,
        horizon=cfg.horizon,
        mean_cost=mc,
        ci_cost=cc,
        mean_queue=mq,
        ci_queue=cq,
        cap_hit_fraction=frac,
        costs=costs,
        queue_lengths=qlens,
        warnings=warnings,
        wall_clock=time.perf_counter() - t0,
    )


@dataclass
class ComparisonReport:
    scenario: str
    baseline: str
    challenger: str
    baseline_cost: float
    challenger_cost: float
    baseline_queue: float
    challenger_queue: float
    cost_reduction_pct: float
    queue_reduction_pct: float
    paired: bool = False
    paired_cost_diff: float | None = None
    paired_cost_ci: float | None = None
    paired_queue_diff: float | None = None
    paired_queue_ci: float | None = None

    @property
    def significant(self) -> bool:
        """Paired 95% CI on (baseline - challenger) cost excludes zero."""
        if not self.paired:
            raise ContractViolation("significance needs paired data")
        return abs(self.paired_cost_diff) > self.paired_cost_ci

    def to_json(self) -> str:
        d = asdict(self)
        d["schema"] = COMPARISON_SCHEMA
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    def summary(self) -> str:
        out = [
            f"{self.challenger} vs {self.baseline} on {self.scenario}",
            f"  cost  {self.baseline_cost:.4f} -> {self.challenger_cost:.4f}  reduction {self.cost_reduction_pct:.2f}%",
            f"  queue {self.baseline_queue:.4f} -> {self.challenger_queue:.4f}  reduction {self.queue_reduction_pct:.2f}%",
        ]
        if self.paired:
            out.append(f"  paired cost difference {self.paired_cost_diff:.4f} +/- {self.paired_cost_ci:.4f}")
        return "\n".join(out)


def reduction_pct(base: float, chal: float) -> float:
    return 100.0 * (base - chal) / base if base else 0.0


def paired_ci(base, chal) -> tuple[float, float]:
    """Mean of ``base - chal`` and its paired-t 95% half-width."""
    d = np.asarray(base, dtype=np.float64) - np.asarray(chal, dtype=np.float64)
    if d.size < 2:
        raise ContractViolation("paired CI needs at least two pairs")
    half = stats.t.ppf(0.975, d.size - 1) * d.std(ddof=1) / math.sqrt(d.size)
    return float(d.mean()), float(half)


def compare(base: EvalReport, chal: EvalReport, paired: bool = False) -> ComparisonReport:
    if base.scenario_hash != chal.scenario_hash:
        raise ContractViolation("reports come from different scenarios")
    rep = ComparisonReport(
        scenario=base.scenario,
        baseline=base.policy,
        challenger=chal.policy,
        baseline_cost=base.mean_cost,
        challenger_cost=chal.mean_cost,
        baseline_queue=base.mean_queue,
        challenger_queue=chal.mean_queue,
        cost_reduction_pct=reduction_pct(base.mean_cost, chal.mean_cost),
        queue_reduction_pct=reduction_pct(base.mean_queue, chal.mean_queue),
    )
    if paired:
        if (base.base_seed, base.runs, base.horizon) != (chal.base_seed, chal.runs, chal.horizon):
            raise ContractViolation("paired comparison needs identical seeds and horizon")
        rep.paired = True
        rep.paired_cost_diff, rep.paired_cost_ci = paired_ci(base.costs, chal.costs)
        rep.paired_queue_diff, rep.paired_queue_ci = paired_ci(base.queue_lengths, chal.queue_lengths)
    return rep
