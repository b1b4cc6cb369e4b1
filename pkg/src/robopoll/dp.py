"""Exact discounted value iteration on truncated instances.

States are indexed mixed-radix: ``index = loc_index * (cap+1)**N + x_index``
where ``loc_index`` enumerates ordered tuples of distinct robot locations
(lexicographic) and ``x_index`` reads the queue vector as a base ``cap+1``
number with queue 0 most significant.

A joint action is encoded robot by robot (robot 0 most significant) in base
``N + 2`` with per-robot codes ``0 = Idle``, ``1 = Serve``, ``2 + j =
Switch(j)``. Among equal-valued actions the smallest encoding wins.

Each sweep splits the backup in two: the arrival expectation factorizes over
queues, so ``W = E_a V(min(y + a, cap))`` is computed axis by axis on the
post-decision table, then every state takes the minimum of ``W`` over the
post-decision states its feasible actions lead to.
"""

from __future__ import annotations

import itertools
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import Policy
from .core import (
    IDLE,
    SERVE,
    ContractViolation,
    Convention,
    JointAction,
    ScenarioConfig,
    SystemState,
    Switch,
)

log = logging.getLogger(__name__)

MAX_STATES = 50_000_000
DEFAULT_CAPS = {"s1": 15, "s2": 15, "s3": 12}
TABLE_MAGIC = b"RPDPTBL\0"
TABLE_VERSION = 1


class InstanceTooLarge(ContractViolation):
    pass


@dataclass
class StateIndexer:
    num_robots: int
    num_queues: int
    cap: int
    loc_tuples: np.ndarray = field(repr=False)  # (P, M)
    loc_lookup: np.ndarray = field(repr=False)  # (N**M,) -> loc index or -1

    @property
    def radix(self) -> int:
        return self.cap + 1

    @property
    def queue_block(self) -> int:
        return self.radix**self.num_queues

    @property
    def num_states(self) -> int:
        return len(self.loc_tuples) * self.queue_block

    @property
    def strides(self) -> np.ndarray:
        N = self.num_queues
        return self.radix ** np.arange(N - 1, -1, -1, dtype=np.int64)

    def _loc_code(self, locs: np.ndarray) -> np.ndarray:
        w = self.num_queues ** np.arange(self.num_robots - 1, -1, -1, dtype=np.int64)
        return locs @ w

    def encode_batch(self, locs: np.ndarray, queues: np.ndarray) -> np.ndarray:
        """Index of each row; queue lengths above ``cap`` are clamped."""
        li = self.loc_lookup[self._loc_code(np.asarray(locs, dtype=np.int64))]
        if np.any(li < 0):
            raise ContractViolation("co-located robots have no state index")
        x = np.minimum(np.asarray(queues, dtype=np.int64), self.cap)
        return li * self.queue_block + x @ self.strides

    def encode(self, state: SystemState) -> int:
        return int(self.encode_batch(np.asarray([state.locations]), np.asarray([state.queues]))[0])

    def decode(self, index: int) -> SystemState:
        if not (0 <= index < self.num_states):
            raise IndexError(index)
        li, xi = divmod(int(index), self.queue_block)
        xs = []
        for stride in self.strides:
            d, xi = divmod(xi, int(stride))
            xs.append(d)
        return SystemState(tuple(int(v) for v in self.loc_tuples[li]), tuple(xs))

    def queue_digits(self) -> np.ndarray:
        """``(queue_block, N)`` queue vectors in x-index order."""
        grids = np.indices((self.radix,) * self.num_queues).reshape(self.num_queues, -1)
        return grids.T.astype(np.int64)


def enumerate_states(cfg: ScenarioConfig, cap: int, max_states: int = MAX_STATES) -> StateIndexer:
    M, N = cfg.M, cfg.N
    if cap < 1:
        raise ContractViolation("cap must be >= 1")
    n_loc = 1
    for k in range(M):
        n_loc *= N - k
    K = n_loc * (cap + 1) ** N
    if K > max_states:
        raise InstanceTooLarge(f"{K} states exceed the limit of {max_states}")
    tuples = np.asarray(list(itertools.permutations(range(N), M)), dtype=np.int64).reshape(-1, M)
    lookup = np.full(N**M, -1, dtype=np.int64)
    w = N ** np.arange(M - 1, -1, -1, dtype=np.int64)
    lookup[tuples @ w] = np.arange(len(tuples))
    return StateIndexer(M, N, cap, tuples, lookup)


# ---------------------------------------------------------------------------
# action encoding


def robot_code(action) -> int:
    if action == IDLE:
        return 0
    if action == SERVE:
        return 1
    return 2 + action.target


def encode_action(u: JointAction, num_queues: int) -> int:
    code = 0
    for a in u:
        code = code * (num_queues + 2) + robot_code(a)
    return code


def decode_action(code: int, num_robots: int, num_queues: int) -> JointAction:
    B = num_queues + 2
    out = []
    for _ in range(num_robots):
        code, c = divmod(code, B)
        out.append(IDLE if c == 0 else SERVE if c == 1 else Switch(c - 2))
    return JointAction(tuple(reversed(out)))


def _decode_codes(codes: np.ndarray, locs: np.ndarray, num_queues: int) -> tuple[np.ndarray, np.ndarray]:
    B = num_queues + 2
    M = locs.shape[1]
    per = np.empty_like(locs)
    c = codes.copy()
    for r in range(M - 1, -1, -1):
        per[:, r] = c % B
        c //= B
    serve = per == 1
    dest = np.where(per >= 2, per - 2, locs)
    return dest, serve


def joint_actions(
    locs: tuple[int, ...],
    busy: tuple[bool, ...],
    num_queues: int,
    convention: Convention,
    exhaustive: bool = True,
) -> list[tuple[int, tuple[int, ...], tuple[bool, ...]]]:
    """All admissible ``(code, destinations, serve flags)``, sorted by code."""
    options = []
    occupied = set(locs)
    for s, b in zip(locs, busy):
        opts = []
        if b:
            opts.append((1, s, True))
        if not (b and exhaustive):
            opts.append((0, s, False))
            for j in range(num_queues):
                if j == s or (convention is Convention.CONSERVATIVE and j in occupied):
                    continue
                opts.append((2 + j, j, False))
        options.append(opts)
    B = num_queues + 2
    out = []
    for combo in itertools.product(*options):
        dest = tuple(o[1] for o in combo)
        if len(set(dest)) != len(dest):
            continue
        code = 0
        for o in combo:
            code = code * B + o[0]
        out.append((code, dest, tuple(o[2] for o in combo)))
    out.sort()
    return out


# ---------------------------------------------------------------------------
# value iteration


@dataclass
class ValueTable:
    values: np.ndarray
    policy: np.ndarray
    residual: float
    iterations: int
    converged: bool
    cap: int
    beta: float
    scenario_hash: str
    num_robots: int
    num_queues: int
    exhaustive: bool = True
    residual_history: list[float] = field(default_factory=list, repr=False)


class _Transitions:
    """Post-decision successor indices for every (state, action) pair."""

    def __init__(self, cfg: ScenarioConfig, idx: StateIndexer, exhaustive: bool):
        K, Rq, N, M = idx.num_states, idx.queue_block, cfg.N, cfg.M
        digits = idx.queue_digits()
        strides = idx.strides
        xs = np.arange(Rq, dtype=np.int64)
        groups = []
        a_max = 1
        for li, lt in enumerate(idx.loc_tuples):
            nonempty = digits[:, lt] > 0  # (Rq, M)
            pattern = nonempty @ (1 << np.arange(M, dtype=np.int64))
            for mask in range(1 << M):
                sel = np.nonzero(pattern == mask)[0]
                if sel.size == 0:
                    continue
                busy = tuple(bool(mask >> r & 1) for r in range(M))
                acts = joint_actions(tuple(int(v) for v in lt), busy, N, cfg.convention, exhaustive)
                a_max = max(a_max, len(acts))
                groups.append((li, sel, acts))
        self.succ = np.full((K, a_max), K, dtype=np.int64)
        self.codes = np.full((K, a_max), -1, dtype=np.int64)
        for li, sel, acts in groups:
            rows = li * Rq + xs[sel]
            for a, (code, dest, serve) in enumerate(acts):
                d = np.zeros(N, dtype=np.int64)
                for s, sv in zip(idx.loc_tuples[li], serve):
                    if sv:
                        d[s] = 1
                nl = idx.loc_lookup[idx._loc_code(np.asarray([dest]))][0]
                self.succ[rows, a] = nl * Rq + xs[sel] - int(d @ strides)
                self.codes[rows, a] = code
        self.cost = (np.tile(digits.sum(axis=1), len(idx.loc_tuples))).astype(np.float64)


def arrival_expectation(values: np.ndarray, idx: StateIndexer, rates: np.ndarray) -> np.ndarray:
    """``W[z] = E_a V(s; min(x + a, cap))`` with independent Bernoulli arrivals."""
    P = len(idx.loc_tuples)
    W = values.reshape((P,) + (idx.radix,) * idx.num_queues)
    for i, p in enumerate(rates):
        ax = 1 + i
        shifted = np.concatenate(
            [np.take(W, np.arange(1, idx.radix), axis=ax), np.take(W, [idx.cap], axis=ax)], axis=ax
        )
        W = (1.0 - p) * W + p * shifted
    return W.reshape(-1)


def value_iteration(
    cfg: ScenarioConfig,
    cap: int,
    tol: float = 1e-6,
    max_iters: int = 20_000,
    exhaustive: bool = True,
    max_states: int = MAX_STATES,
) -> ValueTable:
    """Synchronous value iteration from ``V = 0``; returns the table and greedy policy."""
    if tol <= 0:
        raise ContractViolation("tol must be positive")
    idx = enumerate_states(cfg, cap, max_states)
    tr = _Transitions(cfg, idx, exhaustive)
    rates = cfg.rates
    V = np.zeros(idx.num_states)
    history = []
    residual = np.inf
    it = 0
    inf = np.array([np.inf])
    while it < max_iters:
        W = np.concatenate([arrival_expectation(V, idx, rates), inf])
        Vn = tr.cost + cfg.beta * W[tr.succ].min(axis=1)
        residual = float(np.max(np.abs(Vn - V)))
        V = Vn
        it += 1
        history.append(residual)
        if residual <= tol:
            break
    converged = residual <= tol
    if not converged:
        log.warning("value iteration stopped after %d sweeps with residual %.3g", it, residual)
    W = np.concatenate([arrival_expectation(V, idx, rates), inf])
    best = np.argmin(W[tr.succ], axis=1)
    policy = np.take_along_axis(tr.codes, best[:, None], axis=1)[:, 0]
    return ValueTable(
        values=V,
        policy=policy,
        residual=residual,
        iterations=it,
        converged=converged,
        cap=cap,
        beta=cfg.beta,
        scenario_hash=cfg.scenario_hash(),
        num_robots=cfg.M,
        num_queues=cfg.N,
        exhaustive=exhaustive,
        residual_history=history,
    )


def bellman_backup(
    state: SystemState,
    values: ValueTable,
    cfg: ScenarioConfig,
    idx: StateIndexer | None = None,
) -> tuple[float, JointAction]:
    """One backup at ``state`` by explicit enumeration of all ``2**N`` arrival outcomes."""
    idx = idx or enumerate_states(cfg, values.cap)
    V = values.values
    busy = tuple(state.queues[s] > 0 for s in state.locations)
    best_val, best_code = np.inf, None
    outcomes = list(itertools.product((0, 1), repeat=cfg.N))
    rates = cfg.arrival_rates
    for code, dest, serve in joint_actions(
        state.locations, busy, cfg.N, cfg.convention, values.exhaustive
    ):
        post = list(state.queues)
        for s, sv in zip(state.locations, serve):
            if sv:
                post[s] -= 1
        total = 0.0
        for a in outcomes:
            prob = 1.0
            for ai, p in zip(a, rates):
                prob *= p if ai else 1.0 - p
            if prob == 0.0:
                continue
            nxt = SystemState(dest, tuple(min(y + ai, values.cap) for y, ai in zip(post, a)))
            total += prob * V[idx.encode(nxt)]
        if total < best_val:
            best_val, best_code = total, code
    value = sum(state.queues) + cfg.beta * best_val
    return float(value), decode_action(best_code, cfg.M, cfg.N)


def bellman_residual(table: ValueTable, cfg: ScenarioConfig) -> float:
    """Sup-norm of ``T V - V`` for the stored table."""
    idx = enumerate_states(cfg, table.cap)
    tr = _Transitions(cfg, idx, table.exhaustive)
    W = np.concatenate([arrival_expectation(table.values, idx, cfg.rates), [np.inf]])
    TV = tr.cost + cfg.beta * W[tr.succ].min(axis=1)
    return float(np.max(np.abs(TV - table.values)))


def monotonicity_violations(table: ValueTable, cfg: ScenarioConfig, slack: float = 1e-9) -> int:
    """Count places where ``V`` decreases when one queue grows by one."""
    idx = enumerate_states(cfg, table.cap)
    V = table.values.reshape((len(idx.loc_tuples),) + (idx.radix,) * cfg.N)
    return int(sum(np.count_nonzero(np.diff(V, axis=1 + i) < -slack) for i in range(cfg.N)))


class DPPolicy(Policy):
    """Greedy policy read off a solved table; queues above the cap are clamped."""

    name = "dp"

    def __init__(self, table: ValueTable, cfg: ScenarioConfig, indexer: StateIndexer | None = None):
        super().__init__(cfg)
        if (table.num_robots, table.num_queues) != (cfg.M, cfg.N):
            raise ContractViolation("table dimensions do not match the scenario")
        self.table = table
        self.indexer = indexer or enumerate_states(cfg, table.cap)
        self.exhaustive = table.exhaustive

    def act_batch(self, locs, queues, rng=None):
        codes = self.table.policy[self.indexer.encode_batch(locs, queues)]
        return _decode_codes(codes, locs, self.cfg.N)


def lookup_policy(table: ValueTable, indexer: StateIndexer, cfg: ScenarioConfig) -> DPPolicy:
    return DPPolicy(table, cfg, indexer)


# ---------------------------------------------------------------------------
# persistence

_HEADER = struct.Struct("<8sIQIIIdd??Q64s")


def save_table(table: ValueTable, path: str | Path) -> None:
    header = _HEADER.pack(
        TABLE_MAGIC,
        TABLE_VERSION,
        table.values.size,
        table.cap,
        table.num_robots,
        table.num_queues,
        table.beta,
        table.residual,
        table.exhaustive,
        table.converged,
        table.iterations,
        table.scenario_hash.encode("ascii"),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(table.values.astype("<f8").tobytes())
        fh.write(table.policy.astype("<i8").tobytes())


def load_table(path: str | Path, cfg: ScenarioConfig | None = None) -> ValueTable:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise ContractViolation(f"{path}: truncated table header")
    magic, ver, K, cap, M, N, beta, resid, exh, conv, iters, h = _HEADER.unpack_from(blob)
    if magic != TABLE_MAGIC or ver != TABLE_VERSION:
        raise ContractViolation(f"{path}: not a version {TABLE_VERSION} value table")
    body = blob[_HEADER.size :]
    if len(body) != 16 * K:
        raise ContractViolation(f"{path}: expected {K} entries")
    values = np.frombuffer(body[: 8 * K], dtype="<f8").astype(np.float64)
    policy = np.frombuffer(body[8 * K :], dtype="<i8").astype(np.int64)
    table = ValueTable(values, policy, resid, iters, conv, cap, beta, h.decode("ascii"), M, N, exh)
    if cfg is not None and cfg.scenario_hash() != table.scenario_hash:
        raise ContractViolation(f"{path}: table was solved for a different scenario")
    return table
