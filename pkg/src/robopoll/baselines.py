"""Exhaustive-service wrapping and the baseline deciders (ESL, uniform random).

A decider only chooses destinations for idle robots. ``exhaustive_wrap``
turns it into a policy: busy robots always serve, an idle robot whose
destination equals its own location idles, anything else is a switch.
"""

from __future__ import annotations

from typing import Callable, Protocol

import numpy as np

from .core import (
    Convention,
    JointAction,
    ScenarioConfig,
    SystemState,
    busy_mask,
    check_batch,
    joint_action_from_arrays,
)


class AssignmentDecider(Protocol):
    def __call__(
        self,
        locs: np.ndarray,
        queues: np.ndarray,
        cfg: ScenarioConfig,
        rng: np.random.Generator | None,
    ) -> np.ndarray:
        """Return ``(R, M)`` destinations; entries of busy robots are ignored."""


def feasible_targets(
    locs: np.ndarray,
    busy: np.ndarray,
    dest: np.ndarray,
    r: int,
    num_queues: int,
    convention: Convention,
) -> np.ndarray:
    """``(R, N)`` mask of destinations open to robot ``r`` in sequential decoding.

    ``dest[:, :r]`` holds the choices of robots decoded earlier. Busy robots
    never move. The robot's own location is always feasible. Under the loose
    convention a queue vacated by an earlier robot becomes available; queues
    of robots that have not decided yet stay blocked.
    """
    R, M = locs.shape
    rows = np.arange(R)
    blocked = np.zeros((R, num_queues), dtype=bool)
    for k in range(M):
        if k == r:
            continue
        if k < r:
            blocked[rows, dest[:, k]] = True
            if convention is Convention.CONSERVATIVE:
                blocked[rows, locs[:, k]] = True
        else:
            blocked[rows, locs[:, k]] = True
    ok = ~blocked
    ok[rows, locs[:, r]] = True
    return ok


def _wrap_dest(locs: np.ndarray, busy: np.ndarray, dest: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    dest = np.where(busy, locs, dest)
    return dest, busy.copy()


class Policy:
    """Common surface: batched ``act_batch`` plus a per-state ``__call__``."""

    name = "policy"
    exhaustive = True

    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg

    def act_batch(
        self, locs: np.ndarray, queues: np.ndarray, rng: np.random.Generator | None = None
    ) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def __call__(self, state: SystemState, rng: np.random.Generator | None = None) -> JointAction:
        locs = np.asarray([state.locations], dtype=np.int64)
        queues = np.asarray([state.queues], dtype=np.int64)
        dest, serve = self.act_batch(locs, queues, rng)
        return joint_action_from_arrays(dest[0], serve[0], state)


class ExhaustivePolicy(Policy):
    def __init__(
        self,
        decider: AssignmentDecider,
        cfg: ScenarioConfig,
        name: str = "exhaustive",
        validate: bool = True,
    ):
        super().__init__(cfg)
        self.decider = decider
        self.name = name
        self.validate = validate

    def act_batch(self, locs, queues, rng=None):
        busy = busy_mask(locs, queues)
        if busy.all():
            return locs.copy(), busy
        dest, serve = _wrap_dest(locs, busy, self.decider(locs, queues, self.cfg, rng))
        if self.validate:
            check_batch(locs, queues, dest, serve, self.cfg.convention)
        return dest, serve


def exhaustive_wrap(
    decider: AssignmentDecider, cfg: ScenarioConfig, name: str = "exhaustive"
) -> ExhaustivePolicy:
    return ExhaustivePolicy(decider, cfg, name=name)


def _queue_priority(rates: np.ndarray) -> np.ndarray:
    """Rank of each queue among equal lengths: higher rate first, then lower index."""
    order = sorted(range(len(rates)), key=lambda i: (-rates[i], i))
    prio = np.empty(len(rates), dtype=np.int64)
    for rank, i in enumerate(order):
        prio[i] = len(rates) - 1 - rank
    return prio


def esl_decider(locs, queues, cfg: ScenarioConfig, rng=None) -> np.ndarray:
    """Exhaustive-serve-longest: idle robots, in index order, take the longest
    unoccupied, unreserved, nonempty queue; ties by rate then index."""
    R, M = locs.shape
    N = cfg.N
    rows = np.arange(R)
    busy = busy_mask(locs, queues)
    key = queues.astype(np.int64) * N + _queue_priority(cfg.rates)[None, :]
    taken = np.zeros((R, N), dtype=bool)
    np.put_along_axis(taken, locs, True, axis=1)
    dest = locs.copy()
    for r in range(M):
        idle = ~busy[:, r]
        if not idle.any():
            continue
        cand = (~taken) & (queues > 0)
        score = np.where(cand, key, -1)
        best = np.argmax(score, axis=1)
        go = idle & cand[rows, best]
        dest[go, r] = best[go]
        taken[rows[go], best[go]] = True
    return dest


def random_feasible_decider(locs, queues, cfg: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    """Each idle robot, in index order, picks uniformly among its feasible
    destinations (own location included)."""
    if rng is None:
        raise ValueError("random decider needs a random stream")
    R, M = locs.shape
    busy = busy_mask(locs, queues)
    dest = locs.copy()
    for r in range(M):
        idle = ~busy[:, r]
        if not idle.any():
            continue
        ok = feasible_targets(locs, busy, dest, r, cfg.N, cfg.convention)
        counts = ok.sum(axis=1)
        k = np.minimum((rng.random(R) * counts).astype(np.int64), counts - 1)
        pick = np.argmax(np.cumsum(ok, axis=1) > k[:, None], axis=1)
        dest[idle, r] = pick[idle]
    return dest


def stay_put_decider(locs, queues, cfg, rng=None) -> np.ndarray:
    return locs.copy()


def esl_policy(cfg: ScenarioConfig) -> ExhaustivePolicy:
    return exhaustive_wrap(esl_decider, cfg, name="esl")


def random_policy(cfg: ScenarioConfig) -> ExhaustivePolicy:
    return exhaustive_wrap(random_feasible_decider, cfg, name="random")


def esl_decide(state: SystemState, cfg: ScenarioConfig) -> JointAction:
    return esl_policy(cfg)(state)


def random_feasible_decide(state: SystemState, cfg: ScenarioConfig, rng: np.random.Generator) -> JointAction:
    return random_policy(cfg)(state, rng)


BASELINES: dict[str, Callable[[ScenarioConfig], Policy]] = {
    "esl": esl_policy,
    "random": random_policy,
}
