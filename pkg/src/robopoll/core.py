"""System model: scenario, state, actions, one-slot transition and holding cost.

Queue and robot indices are 0-based throughout the package. A robot action is
one of ``Serve``, ``Idle`` or ``Switch(target)``; a switching robot spends the
whole slot travelling and occupies its target from the next slot on. Arrivals
join their queue at the end of the slot (late-arrival convention) and are
dropped when the queue already holds ``queue_cap`` tasks.

Besides the per-state API (``SystemState``/``JointAction``/``step``) there is
an array form used by the simulators: a batch of states is a pair
``locs (R, M)``, ``queues (R, N)`` and a batch of actions is
``dest (R, M)``, ``serve (R, M)``.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class ContractViolation(ValueError):
    """Raised when an operation's precondition or feasibility rule is broken."""


class Convention(str, enum.Enum):
    """Occupancy convention for switch targets.

    CONSERVATIVE: a switch target must be unoccupied at the current slot and
    not reserved by another robot in the same decision.
    LOOSE: a switch target only has to be free at the next slot.
    """

    CONSERVATIVE = "conservative"
    LOOSE = "loose"


@dataclass(frozen=True)
class ScenarioConfig:
    num_robots: int
    num_queues: int
    arrival_rates: tuple[float, ...]
    beta: float = 0.99
    queue_cap: int = 100
    horizon: int = 1000
    convention: Convention = Convention.CONSERVATIVE
    name: str = "custom"

    def __post_init__(self) -> None:
        object.__setattr__(self, "arrival_rates", tuple(float(p) for p in self.arrival_rates))
        object.__setattr__(self, "convention", Convention(self.convention))
        if self.num_robots < 1 or self.num_queues < 1:
            raise ContractViolation("num_robots and num_queues must be positive")
        if self.num_robots > self.num_queues:
            raise ContractViolation(
                f"num_robots={self.num_robots} exceeds num_queues={self.num_queues}"
            )
        if len(self.arrival_rates) != self.num_queues:
            raise ContractViolation(
                f"expected {self.num_queues} arrival rates, got {len(self.arrival_rates)}"
            )
        if any(not (0.0 <= p <= 1.0) for p in self.arrival_rates):
            raise ContractViolation(f"arrival rates must lie in [0, 1]: {self.arrival_rates}")
        if not (0.0 < self.beta < 1.0):
            raise ContractViolation(f"beta must lie in (0, 1), got {self.beta}")
        if self.queue_cap < 1 or self.horizon < 1:
            raise ContractViolation("queue_cap and horizon must be >= 1")

    @property
    def M(self) -> int:
        return self.num_robots

    @property
    def N(self) -> int:
        return self.num_queues

    @property
    def rates(self) -> np.ndarray:
        return np.asarray(self.arrival_rates, dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "M": self.num_robots,
            "N": self.num_queues,
            "rates": list(self.arrival_rates),
            "beta": self.beta,
            "qmax": self.queue_cap,
            "horizon": self.horizon,
            "convention": self.convention.value,
        }

    def scenario_hash(self) -> str:
        """Digest of everything that changes the dynamics (the name is excluded)."""
        payload = self.to_dict()
        payload.pop("name")
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def empty_state(self) -> "SystemState":
        return SystemState(tuple(range(self.num_robots)), (0,) * self.num_queues)


@dataclass(frozen=True)
class SystemState:
    locations: tuple[int, ...]
    queues: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "locations", tuple(int(s) for s in self.locations))
        object.__setattr__(self, "queues", tuple(int(x) for x in self.queues))
        if len(set(self.locations)) != len(self.locations):
            raise ContractViolation(f"robots co-located: {self.locations}")
        if any(x < 0 for x in self.queues):
            raise ContractViolation(f"negative queue length: {self.queues}")
        if any(not (0 <= s < len(self.queues)) for s in self.locations):
            raise ContractViolation(f"location out of range: {self.locations}")

    def check(self, cfg: ScenarioConfig) -> None:
        if len(self.locations) != cfg.M or len(self.queues) != cfg.N:
            raise ContractViolation("state dimensions do not match the scenario")
        if any(x > cfg.queue_cap for x in self.queues):
            raise ContractViolation(f"queue length above cap {cfg.queue_cap}: {self.queues}")


class ActionKind(str, enum.Enum):
    SERVE = "serve"
    IDLE = "idle"
    SWITCH = "switch"


@dataclass(frozen=True, order=True)
class RobotAction:
    kind: ActionKind
    target: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", ActionKind(self.kind))
        if (self.kind is ActionKind.SWITCH) != (self.target is not None):
            raise ContractViolation("exactly Switch actions carry a target")

    def __repr__(self) -> str:
        if self.kind is ActionKind.SWITCH:
            return f"Switch({self.target})"
        return self.kind.value.capitalize()


SERVE = RobotAction(ActionKind.SERVE)
IDLE = RobotAction(ActionKind.IDLE)


def Switch(target: int) -> RobotAction:  # noqa: N802 - reads like the action name
    return RobotAction(ActionKind.SWITCH, int(target))


@dataclass(frozen=True)
class JointAction:
    actions: tuple[RobotAction, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "actions", tuple(self.actions))

    def __iter__(self):
        return iter(self.actions)

    def __len__(self) -> int:
        return len(self.actions)

    def __getitem__(self, r: int) -> RobotAction:
        return self.actions[r]

    def destinations(self, state: SystemState) -> tuple[int, ...]:
        return tuple(
            a.target if a.kind is ActionKind.SWITCH else s
            for a, s in zip(self.actions, state.locations)
        )

    def serve_flags(self) -> tuple[bool, ...]:
        return tuple(a.kind is ActionKind.SERVE for a in self.actions)


@dataclass(frozen=True)
class StepResult:
    state: SystemState
    departures: tuple[int, ...]
    cap_hits: tuple[int, ...] = field(default=())

    @property
    def cap_hit(self) -> bool:
        return any(self.cap_hits)


# ---------------------------------------------------------------------------
# arrivals and random streams

# Stream domains keep evaluation, training and policy randomness disjoint.
DOMAIN_EVAL = 1
DOMAIN_TRAIN = 2
DOMAIN_POLICY = 3
DOMAIN_SCENARIO = 4


def substream(seed: int, *key: int) -> np.random.Generator:
    """Counter-based generator for the named substream ``(seed, *key)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def _check_rates(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if np.any(~np.isfinite(p)) or np.any(p < 0.0) or np.any(p > 1.0):
        raise ContractViolation(f"arrival rates must lie in [0, 1]: {p}")
    return p


def sample_arrivals(p, rng: np.random.Generator) -> np.ndarray:
    """One slot of independent Bernoulli arrivals, ``a_i = 1`` w.p. ``p_i``."""
    p = _check_rates(p)
    return (rng.random(p.shape[0]) < p).astype(np.int64)


def arrival_schedule(
    p, seed: int, horizon: int, domain: int = DOMAIN_EVAL, *key: int
) -> np.ndarray:
    """Arrivals for a whole episode, shape ``(horizon, N)``, as int8.

    Queue ``i`` draws from its own substream ``(seed; domain, *key, i)``, so
    the schedule does not depend on the policy and two policies simulated
    with the same seed see identical arrivals.
    """
    p = _check_rates(p)
    out = np.empty((horizon, p.shape[0]), dtype=np.int8)
    for i, pi in enumerate(p):
        out[:, i] = substream(seed, domain, *key, i).random(horizon) < pi
    return out


# ---------------------------------------------------------------------------
# per-state operations


def holding_cost(state: SystemState) -> int:
    return sum(state.queues)


def idle_busy_partition(state: SystemState) -> tuple[frozenset[int], frozenset[int]]:
    busy = frozenset(r for r, s in enumerate(state.locations) if state.queues[s] > 0)
    idle = frozenset(range(len(state.locations))) - busy
    return busy, idle


def feasible_robot_actions(
    state: SystemState,
    r: int,
    reserved: Iterable[int],
    cfg: ScenarioConfig,
) -> set[RobotAction]:
    """Exhaustive-class choices of robot ``r`` given already reserved targets.

    Under the loose convention ``reserved`` must hold every queue that some
    other robot will occupy at the next slot.
    """
    if not (0 <= r < len(state.locations)):
        raise ContractViolation(f"invalid robot index {r}")
    here = state.locations[r]
    if state.queues[here] > 0:
        return {SERVE}
    reserved = set(reserved)
    occupied = set(state.locations)
    out = {IDLE}
    for j in range(len(state.queues)):
        if j == here or j in reserved:
            continue
        if cfg.convention is Convention.CONSERVATIVE and j in occupied:
            continue
        out.add(Switch(j))
    return out


def check_joint_action(
    state: SystemState, u: JointAction, cfg: ScenarioConfig, exhaustive: bool = False
) -> None:
    """Raise ``ContractViolation`` unless ``u`` is admissible at ``state``."""
    if len(u) != len(state.locations):
        raise ContractViolation("joint action has the wrong number of robots")
    occupied = set(state.locations)
    for r, (a, s) in enumerate(zip(u, state.locations)):
        if a.kind is ActionKind.SERVE and state.queues[s] == 0:
            raise ContractViolation(f"robot {r} serves an empty queue")
        if a.kind is ActionKind.SWITCH:
            if a.target == s or not (0 <= a.target < len(state.queues)):
                raise ContractViolation(f"robot {r} has invalid switch target {a.target}")
            if cfg.convention is Convention.CONSERVATIVE and a.target in occupied:
                raise ContractViolation(f"robot {r} switches to occupied queue {a.target}")
        if exhaustive and state.queues[s] > 0 and a.kind is not ActionKind.SERVE:
            raise ContractViolation(f"robot {r} leaves a nonempty queue under exhaustive service")
    dest = u.destinations(state)
    if len(set(dest)) != len(dest):
        raise ContractViolation(f"joint action co-locates robots: {dest}")


def step(
    state: SystemState, u: JointAction, a: Sequence[int], cfg: ScenarioConfig
) -> StepResult:
    """Advance one slot: serve, then move switchers, then append arrivals."""
    check_joint_action(state, u, cfg)
    d = [0] * cfg.N
    for act, s in zip(u, state.locations):
        if act.kind is ActionKind.SERVE:
            d[s] = 1
    raw = [x - di + int(ai) for x, di, ai in zip(state.queues, d, a)]
    hits = tuple(int(v > cfg.queue_cap) for v in raw)
    nxt = SystemState(u.destinations(state), tuple(min(v, cfg.queue_cap) for v in raw))
    return StepResult(nxt, tuple(d), hits)


def joint_action_from_arrays(dest: Sequence[int], serve: Sequence[bool], state: SystemState) -> JointAction:
    acts = []
    for dj, sv, s in zip(dest, serve, state.locations):
        if int(dj) != s:
            acts.append(Switch(int(dj)))
        else:
            acts.append(SERVE if sv else IDLE)
    return JointAction(tuple(acts))


# ---------------------------------------------------------------------------
# batched array form


def busy_mask(locs: np.ndarray, queues: np.ndarray) -> np.ndarray:
    """``(R, M)`` bool, True where the robot sits at a nonempty queue."""
    return np.take_along_axis(queues, locs, axis=1) > 0


def occupancy(locs: np.ndarray, num_queues: int) -> np.ndarray:
    occ = np.zeros((locs.shape[0], num_queues), dtype=bool)
    np.put_along_axis(occ, locs, True, axis=1)
    return occ


def step_batch(
    locs: np.ndarray,
    queues: np.ndarray,
    dest: np.ndarray,
    serve: np.ndarray,
    arrivals: np.ndarray,
    queue_cap: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized slot transition. Returns ``(locs', queues', cap_hits)``.

    The caller is responsible for feasibility (see ``check_batch``).
    """
    R, N = queues.shape
    d = np.zeros((R, N), dtype=queues.dtype)
    rows = np.repeat(np.arange(R), locs.shape[1]).reshape(locs.shape)
    np.add.at(d, (rows[serve], locs[serve]), 1)
    raw = queues - d + arrivals
    hits = raw > queue_cap
    return dest.copy(), np.minimum(raw, queue_cap), hits


def check_batch(
    locs: np.ndarray,
    queues: np.ndarray,
    dest: np.ndarray,
    serve: np.ndarray,
    convention: Convention,
    exhaustive: bool = True,
) -> None:
    """Vectorized admissibility check; raises on the first violation found."""
    busy = busy_mask(locs, queues)
    stay = dest == locs
    if np.any(serve & ~busy):
        raise ContractViolation("serve issued at an empty queue")
    if np.any(serve & ~stay):
        raise ContractViolation("serve combined with a switch")
    if exhaustive and np.any(busy & ~serve):
        raise ContractViolation("busy robot not serving under exhaustive service")
    srt = np.sort(dest, axis=1)
    if np.any(srt[:, 1:] == srt[:, :-1]):
        raise ContractViolation("joint action co-locates robots")
    if convention is Convention.CONSERVATIVE:
        occ = occupancy(locs, queues.shape[1])
        hit = np.take_along_axis(occ, dest, axis=1) & ~stay
        if np.any(hit):
            raise ContractViolation("switch into a currently occupied queue")
