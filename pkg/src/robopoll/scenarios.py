"""Asymmetric arrival-rate generation on the 0.05 grid, scenario files and presets.

Rates are handled as integer grid units (``rate = units / 20``) so that the
total load ``M * rho`` is met exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import DOMAIN_SCENARIO, ContractViolation, Convention, ScenarioConfig, substream

GRID = 0.05
UNITS_PER_ONE = 20
LAMBDA_MIN = 0.05
LAMBDA_MAX = 0.6
SCENARIO_SCHEMA = "robopoll.scenario/1"
_EPS = 1e-9


class GenerationError(ContractViolation):
    pass


def to_units(x: float) -> int:
    u = x * UNITS_PER_ONE
    r = round(u)
    if abs(u - r) > 1e-6:
        raise GenerationError(f"{x} is not a multiple of {GRID}")
    return int(r)


def units_to_rates(units) -> tuple[float, ...]:
    return tuple(int(u) / UNITS_PER_ONE for u in units)


@dataclass(frozen=True)
class GenSpec:
    num_robots: int
    num_queues: int
    load: float
    lambda_min: float = LAMBDA_MIN
    lambda_max: float = LAMBDA_MAX
    alpha: float = 1.0
    seed: int = 0

    @property
    def total_units(self) -> int:
        return to_units(self.num_robots * self.load)

    @property
    def lo_units(self) -> int:
        return to_units(self.lambda_min)

    @property
    def hi_units(self) -> int:
        return int(math.floor(min(self.lambda_max, self.load) * UNITS_PER_ONE + 1e-6))

    def check(self) -> None:
        if self.num_robots < 1 or self.num_queues < self.num_robots:
            raise GenerationError("need 1 <= M <= N")
        if self.alpha <= 0:
            raise GenerationError("Dirichlet concentration must be positive")
        U, lo, hi = self.total_units, self.lo_units, self.hi_units
        if not (self.num_queues * lo <= U <= self.num_queues * hi):
            raise GenerationError(
                f"infeasible: N*lambda_min={self.num_queues * lo}u, M*rho={U}u, N*upper={self.num_queues * hi}u"
            )


def clamp_redistribute(target: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Scaled copy ``clip(s * target, lo, hi)`` with ``s`` chosen so the total
    is unchanged (needs ``n * lo <= total <= n * hi``)."""
    t = np.asarray(target, dtype=np.float64)
    total = float(t.sum())
    if not (t.size * lo - _EPS <= total <= t.size * hi + _EPS):
        raise GenerationError("total cannot be met within the bounds")

    def filled(scale: float) -> float:
        return float(np.clip(scale * t, lo, hi).sum())

    a, b = 0.0, 1.0
    while filled(b) < total and b < 1e300:
        b *= 2.0
    for _ in range(200):
        mid = 0.5 * (a + b)
        if filled(mid) < total:
            a = mid
        else:
            b = mid
    out = np.clip(b * t, lo, hi)
    free = (out > lo) & (out < hi)
    if free.any():
        out[free] += (total - out.sum()) * out[free] / out[free].sum()
    return out


def largest_remainder(target: np.ndarray, total: int) -> np.ndarray:
    """Integer vector summing to ``total``; leftover units go to the largest
    fractional parts, ties to the smaller index."""
    t = np.asarray(target, dtype=np.float64)
    base = np.floor(t + _EPS).astype(np.int64)
    frac = np.round(t - base, 9)
    left = total - int(base.sum())
    if abs(left) > t.size:
        raise GenerationError("target does not sum to the requested total")
    if left < 0:
        order = sorted(range(t.size), key=lambda i: (frac[i], -i))
        for i in order[:-left]:
            base[i] -= 1
    else:
        order = sorted(range(t.size), key=lambda i: (-frac[i], i))
        for i in order[:left]:
            base[i] += 1
    return base


def repair(units: np.ndarray, lo: int, hi: int, max_moves: int = 10_000) -> np.ndarray:
    """Move single units from the largest over-bound entry to the smallest
    under-bound entry (or any entry with room) until all bounds hold."""
    u = units.copy()
    for _ in range(max_moves):
        over = np.nonzero(u > hi)[0]
        under = np.nonzero(u < lo)[0]
        if over.size == 0 and under.size == 0:
            return u
        if over.size:
            src = over[np.argmax(u[over])]
            room = np.nonzero(u < hi)[0]
            if room.size == 0:
                break
            dst = under[np.argmin(u[under])] if under.size else room[np.argmin(u[room])]
        else:
            dst = under[np.argmin(u[under])]
            spare = np.nonzero(u > lo)[0]
            if spare.size == 0:
                break
            src = spare[np.argmax(u[spare])]
        u[src] -= 1
        u[dst] += 1
    raise GenerationError(f"repair failed: units={u.tolist()} bounds=[{lo}, {hi}]")


def quantize(weights, spec: GenSpec) -> np.ndarray:
    """Grid units for given (nonnegative) weights under the load and bounds of ``spec``."""
    spec.check()
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (spec.num_queues,) or np.any(w < 0) or w.sum() <= 0:
        raise GenerationError("weights must be a nonnegative vector of length N with positive sum")
    U, lo, hi = spec.total_units, spec.lo_units, spec.hi_units
    target = clamp_redistribute(w / w.sum() * U, lo, hi)
    return repair(largest_remainder(target, U), lo, hi)


def generate_units(spec: GenSpec, rng: np.random.Generator | None = None, retries: int = 20) -> np.ndarray:
    rng = rng or substream(spec.seed, DOMAIN_SCENARIO)
    last = None
    for _ in range(retries):
        w = rng.dirichlet(np.full(spec.num_queues, spec.alpha))
        try:
            return quantize(w, spec)
        except GenerationError as exc:
            last = exc
    raise GenerationError(f"no valid rate vector after {retries} draws: {last}")


def generate_rates(spec: GenSpec, rng: np.random.Generator | None = None) -> tuple[float, ...]:
    return units_to_rates(generate_units(spec, rng))


def generated_scenario(spec: GenSpec, name: str | None = None, **kw) -> ScenarioConfig:
    name = name or f"gen-m{spec.num_robots}-n{spec.num_queues}-r{spec.load:g}-s{spec.seed}"
    return ScenarioConfig(spec.num_robots, spec.num_queues, generate_rates(spec), name=name, **kw)


# ---------------------------------------------------------------------------
# validation and files


@dataclass
class Validation:
    errors: list[str]
    warnings: list[str]

    @property
    def ok(self) -> bool:
        return not self.errors


def validate_scenario(d: dict | ScenarioConfig) -> Validation:
    """Structured check of a scenario (dict as in the file format, or a config)."""
    if isinstance(d, ScenarioConfig):
        d = d.to_dict()
    errors, warnings = [], []
    M, N = d.get("M"), d.get("N")
    rates = d.get("rates")
    if not isinstance(M, int) or M < 1:
        errors.append("M must be a positive integer")
    if not isinstance(N, int) or N < 1:
        errors.append("N must be a positive integer")
    if isinstance(M, int) and isinstance(N, int) and M > N:
        errors.append(f"M={M} exceeds N={N}")
    if not isinstance(rates, list) or (isinstance(N, int) and len(rates) != N):
        errors.append("rates must be a list of N numbers")
    else:
        bad = [p for p in rates if not isinstance(p, (int, float)) or not (0.0 <= p <= 1.0)]
        if bad:
            errors.append(f"rates outside [0, 1]: {bad}")
        elif max(rates) <= 0:
            errors.append("at least one arrival rate must be positive")
        else:
            off = [p for p in rates if abs(p * UNITS_PER_ONE - round(p * UNITS_PER_ONE)) > 1e-9]
            if off:
                warnings.append(f"rates not on the {GRID} grid: {off}")
            if isinstance(M, int) and sum(rates) >= M:
                warnings.append(f"total arrival rate {sum(rates):g} >= M={M}: system may be unstable")
    beta = d.get("beta", 0.99)
    if not isinstance(beta, (int, float)) or not (0.0 < beta < 1.0):
        errors.append("beta must lie in (0, 1)")
    for key in ("qmax", "horizon"):
        v = d.get(key, 1)
        if not isinstance(v, int) or v < 1:
            errors.append(f"{key} must be a positive integer")
    conv = d.get("convention", "conservative")
    if conv not in {c.value for c in Convention}:
        errors.append(f"unknown convention {conv!r}")
    return Validation(errors, warnings)


def scenario_to_json(cfg: ScenarioConfig) -> str:
    d = cfg.to_dict()
    d["schema"] = SCENARIO_SCHEMA
    try:
        d["rate_units"] = [to_units(p) for p in cfg.arrival_rates]
    except GenerationError:
        pass
    return json.dumps(d, indent=2, sort_keys=True) + "\n"


def scenario_from_dict(d: dict) -> ScenarioConfig:
    d = dict(d)
    d.pop("schema", None)
    if "rate_units" in d:
        d["rates"] = list(units_to_rates(d.pop("rate_units")))
    v = validate_scenario(d)
    if not v.ok:
        raise ContractViolation("; ".join(v.errors))
    return ScenarioConfig(
        num_robots=d["M"],
        num_queues=d["N"],
        arrival_rates=tuple(d["rates"]),
        beta=d.get("beta", 0.99),
        queue_cap=d.get("qmax", 100),
        horizon=d.get("horizon", 1000),
        convention=Convention(d.get("convention", "conservative")),
        name=d.get("name", "custom"),
    )


PRESETS: dict[str, dict] = {
    "s1": {"name": "s1", "M": 1, "N": 3, "rates": [0.10, 0.25, 0.45]},
    "s2": {"name": "s2", "M": 1, "N": 4, "rates": [0.05, 0.10, 0.25, 0.30]},
    "s3": {"name": "s3", "M": 2, "N": 4, "rates": [0.15, 0.25, 0.50, 0.60]},
    "sym6x36": {"name": "sym6x36", "M": 6, "N": 36, "rates": [0.1167] * 36},
    "sym12x60": {"name": "sym12x60", "M": 12, "N": 60, "rates": [0.14] * 60},
}


def load_scenario(ref: str) -> ScenarioConfig:
    """A preset name or a path to a scenario JSON file."""
    if ref in PRESETS:
        return scenario_from_dict(PRESETS[ref])
    path = Path(ref)
    if not path.exists():
        raise ContractViolation(f"unknown scenario {ref!r} (not a preset or file)")
    return scenario_from_dict(json.loads(path.read_text()))


def save_scenario(cfg: ScenarioConfig, path: str | Path) -> None:
    Path(path).write_text(scenario_to_json(cfg))
