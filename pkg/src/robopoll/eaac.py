"""Exhaustive-assignment actor and centralized pooled critic.

Queue tokens come from per-queue features ``[x/Qmax, p/max p, occupied,
1 - occupied]``; robot tokens from ``[location embedding, x/Qmax and p/max p
at the robot's location, busy bit]``. An idle robot scores every queue by
``<g_r, h_i> / sqrt(d) + c_i``. Idle robots are decoded in ascending index:
queues held by other robots at the start of the slot and destinations taken
by robots decoded earlier are masked out; the robot's own location (Idle)
always stays available. Busy robots serve with probability one.

All forward functions work on batches ``locs (B, M)``, ``queues (B, N)``
and take a mapping ``name -> Tensor`` so they run with or without a tape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import numerics as nx
from .baselines import Policy, feasible_targets
from .core import (
    ContractViolation,
    JointAction,
    ScenarioConfig,
    SystemState,
    busy_mask,
    joint_action_from_arrays,
    occupancy,
)
from .numerics import ParameterStore, Tensor

EMBED_DIM = 16
HIDDEN = 128
QUEUE_FEATURES = 4
ROBOT_FEATURES = EMBED_DIM + 3
GLOBAL_FEATURES = 4
EMBED_INIT = 0.05


@dataclass(frozen=True)
class FeatureContext:
    """Per-scenario constants baked in at load time."""

    num_robots: int
    num_queues: int
    queue_cap: int
    rate_norm: np.ndarray  # p / max p

    @classmethod
    def from_config(cls, cfg: ScenarioConfig) -> "FeatureContext":
        pmax = max(cfg.arrival_rates)
        if pmax <= 0:
            raise ContractViolation("scenario needs at least one positive arrival rate")
        return cls(cfg.M, cfg.N, cfg.queue_cap, cfg.rates / pmax)


def build_features(locs: np.ndarray, queues: np.ndarray, ctx: FeatureContext, dtype=np.float64):
    """Batched features.

    Returns queue features ``(B, N, 4)``, the numeric part of the robot
    features ``(B, M, 3)`` (the embedding is looked up by the networks),
    global backlog statistics ``(B, 4)`` and the busy mask ``(B, M)``.
    """
    B = queues.shape[0]
    xbar = queues.astype(dtype) / ctx.queue_cap
    lam = np.broadcast_to(ctx.rate_norm.astype(dtype), xbar.shape)
    occ = occupancy(locs, ctx.num_queues).astype(dtype)
    qf = np.stack([xbar, lam, occ, 1.0 - occ], axis=-1)
    busy = busy_mask(locs, queues)
    rf = np.stack(
        [
            np.take_along_axis(xbar, locs, axis=1),
            ctx.rate_norm.astype(dtype)[locs],
            busy.astype(dtype),
        ],
        axis=-1,
    )
    total = xbar.sum(axis=1)
    g = np.stack(
        [total, xbar.max(axis=1), total / ctx.num_queues, (~busy).sum(axis=1) / ctx.num_robots],
        axis=-1,
    ).astype(dtype)
    return qf, rf.reshape(B, ctx.num_robots, 3), g, busy


def state_features(state: SystemState, cfg: ScenarioConfig):
    """Features of a single state: ``(queue (N,4), robot numeric (M,3), g (4,))``."""
    ctx = FeatureContext.from_config(cfg)
    qf, rf, g, _ = build_features(np.asarray([state.locations]), np.asarray([state.queues]), ctx)
    return qf[0], rf[0], g[0]


# ---------------------------------------------------------------------------
# parameters


def _mlp_params(store: ParameterStore, prefix: str, sizes: list[int], rng: np.random.Generator) -> None:
    for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]), start=1):
        store.add(f"{prefix}{k}.w", nx.glorot_uniform(rng, a, b))
        store.add(f"{prefix}{k}.b", np.zeros(b, dtype=np.float32))


def init_params(cfg: ScenarioConfig, rng: np.random.Generator, dtype=np.float64) -> ParameterStore:
    """Fresh actor and critic parameters (float32-representable values)."""
    store = ParameterStore(dtype)
    N, d = cfg.N, HIDDEN
    store.add("actor.embed", rng.uniform(-EMBED_INIT, EMBED_INIT, (N, EMBED_DIM)).astype(np.float32))
    _mlp_params(store, "actor.q", [QUEUE_FEATURES, d, d], rng)
    _mlp_params(store, "actor.r", [ROBOT_FEATURES, d, d], rng)
    store.add("actor.c", np.zeros(N, dtype=np.float32))
    store.add("critic.embed", rng.uniform(-EMBED_INIT, EMBED_INIT, (N, EMBED_DIM)).astype(np.float32))
    _mlp_params(store, "critic.q", [QUEUE_FEATURES, d, d], rng)
    _mlp_params(store, "critic.r", [ROBOT_FEATURES, d, d], rng)
    _mlp_params(store, "critic.v", [2 * d + GLOBAL_FEATURES, d, 1], rng)
    return store


def constants(store: ParameterStore) -> dict[str, Tensor]:
    """Parameters wrapped as constant tensors for tape-free evaluation."""
    return {n: Tensor(v, _check=False) for n, v in store.params.items()}


def _encoder(P: Mapping[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    h = nx.relu(nx.add_bias(nx.matmul(x, P[prefix + "1.w"]), P[prefix + "1.b"]))
    return nx.add_bias(nx.matmul(h, P[prefix + "2.w"]), P[prefix + "2.b"])


def _robot_input(P, prefix: str, locs: np.ndarray, rf: np.ndarray) -> Tensor:
    emb = nx.embedding_lookup(P[prefix + "embed"], locs)
    return nx.concat([emb, Tensor(rf, _check=False)], axis=-1)


def actor_logits(P: Mapping[str, Tensor], locs, qf, rf) -> Tensor:
    """Compatibility scores ``(B, M, N)``."""
    h = _encoder(P, "actor.q", Tensor(qf, _check=False))
    g = _encoder(P, "actor.r", _robot_input(P, "actor.", locs, rf))
    scores = nx.scale(nx.dot_product_rows(g, h), 1.0 / np.sqrt(HIDDEN))
    return nx.add_bias(scores, P["actor.c"])


def critic_from_features(P: Mapping[str, Tensor], locs, qf, rf, g) -> Tensor:
    hq = nx.mean_pool_rows(_encoder(P, "critic.q", Tensor(qf, _check=False)))
    hr = nx.mean_pool_rows(_encoder(P, "critic.r", _robot_input(P, "critic.", locs, rf)))
    z = nx.concat([hq, hr, Tensor(g, _check=False)], axis=-1)
    hidden = nx.relu(nx.add_bias(nx.matmul(z, P["critic.v1.w"]), P["critic.v1.b"]))
    out = nx.add_bias(nx.matmul(hidden, P["critic.v2.w"]), P["critic.v2.b"])
    return nx.reshape(out, out.shape[:-1])


# ---------------------------------------------------------------------------
# decoding


@dataclass
class DecodedAssignment:
    robots: tuple[int, ...]
    destinations: tuple[int, ...]
    log_probs: tuple[float, ...]
    log_prob: float
    entropy: float


@dataclass
class BatchDecode:
    dest: np.ndarray  # (B, M)
    serve: np.ndarray  # (B, M)
    active: np.ndarray  # (B, M) idle robots that made a decision
    masks: np.ndarray  # (B, M, N)
    step_log_probs: np.ndarray  # (B, M), zero for busy robots
    step_entropy: np.ndarray  # (B, M)

    @property
    def log_prob(self) -> np.ndarray:
        return self.step_log_probs.sum(axis=1)

    @property
    def entropy(self) -> np.ndarray:
        return self.step_entropy.sum(axis=1)


class EAACModel:
    """Actor/critic forward passes for one scenario."""

    def __init__(self, cfg: ScenarioConfig, dtype=np.float64):
        self.cfg = cfg
        self.ctx = FeatureContext.from_config(cfg)
        self.dtype = np.dtype(dtype)

    def features(self, locs, queues):
        return build_features(locs, queues, self.ctx, self.dtype)

    def masks_for(self, locs: np.ndarray, busy: np.ndarray, dest: np.ndarray) -> np.ndarray:
        """Feasibility masks of every robot given the full destination vector."""
        B, M = locs.shape
        out = np.empty((B, M, self.cfg.N), dtype=bool)
        for r in range(M):
            out[:, r] = feasible_targets(locs, busy, dest, r, self.cfg.N, self.cfg.convention)
        return out

    def decode(
        self,
        P: Mapping[str, Tensor],
        locs: np.ndarray,
        queues: np.ndarray,
        mode: str = "greedy",
        rng: np.random.Generator | None = None,
    ) -> BatchDecode:
        """Sequential masked decoding in ``sample`` or ``greedy`` mode (tape-free)."""
        if mode not in ("sample", "greedy"):
            raise ValueError(f"unknown decode mode {mode!r}")
        if mode == "sample" and rng is None:
            raise ValueError("sample mode needs a random stream")
        B, M = locs.shape
        N = self.cfg.N
        qf, rf, _, busy = self.features(locs, queues)
        idle = ~busy
        dest = locs.copy()
        masks = np.ones((B, M, N), dtype=bool)
        lp = np.zeros((B, M))
        ent = np.zeros((B, M))
        if idle.any():
            logits = actor_logits(P, locs, qf, rf).data
            rows = np.arange(B)
            for r in range(M):
                act = idle[:, r]
                if not act.any():
                    continue
                mask = feasible_targets(locs, busy, dest, r, N, self.cfg.convention)
                masks[:, r] = mask
                logp = nx.masked_log_softmax(Tensor(logits[:, r], _check=False), mask).data
                if mode == "sample":
                    pick = nx.categorical_sample(logp, rng)
                else:
                    pick = nx.masked_argmax(logp)
                dest[act, r] = pick[act]
                lp[act, r] = logp[rows, pick][act]
                p = np.exp(logp)
                ent[act, r] = -np.where(mask, p * np.where(mask, logp, 0.0), 0.0).sum(axis=1)[act]
        return BatchDecode(dest, busy.copy(), idle, masks, lp, ent)

    def score(self, P: Mapping[str, Tensor], locs, queues, dest) -> tuple[Tensor, Tensor]:
        """Differentiable total log-probability and entropy ``(B,)`` of given destinations."""
        qf, rf, _, busy = self.features(locs, queues)
        idle = ~busy
        if np.any(busy & (dest != locs)):
            raise ContractViolation("busy robot given a non-serve action")
        masks = self.masks_for(locs, busy, dest)
        ok = np.take_along_axis(masks, dest[..., None], axis=-1)[..., 0]
        if np.any(idle & ~ok):
            raise ContractViolation("given destination is infeasible for an idle robot")
        logp = nx.masked_log_softmax(actor_logits(P, locs, qf, rf), masks)
        w = Tensor(idle.astype(self.dtype), _check=False)
        picked = nx.mul(nx.categorical_log_prob(logp, dest), w)
        ent = nx.mul(nx.categorical_entropy(logp, masks), w)
        return nx.sum_(picked, axis=1), nx.sum_(ent, axis=1)

    def value(self, P: Mapping[str, Tensor], locs, queues) -> Tensor:
        qf, rf, g, _ = self.features(locs, queues)
        return critic_from_features(P, locs, qf, rf, g)


def actor_forward(
    state: SystemState,
    params: ParameterStore,
    cfg: ScenarioConfig,
    mode: str = "greedy",
    rng: np.random.Generator | None = None,
    actions: JointAction | None = None,
) -> tuple[JointAction, DecodedAssignment]:
    """Single-state actor in ``sample``, ``greedy`` or ``score`` mode."""
    model = EAACModel(cfg, params.dtype)
    P = constants(params)
    locs = np.asarray([state.locations], dtype=np.int64)
    queues = np.asarray([state.queues], dtype=np.int64)
    if mode == "score":
        if actions is None:
            raise ValueError("score mode needs the actions to evaluate")
        dest = np.asarray([actions.destinations(state)], dtype=np.int64)
        busy = busy_mask(locs, queues)
        if any(a.kind.value != "serve" for a, b in zip(actions, busy[0]) if b):
            raise ContractViolation("busy robot given a non-serve action")
        lp, ent = model.score(P, locs, queues, dest)
        idle = np.nonzero(~busy[0])[0]
        # per-decision terms for reporting
        masks = model.masks_for(locs, busy, dest)
        logits = actor_logits(P, locs, *model.features(locs, queues)[:2]).data
        steps = tuple(
            float(nx.masked_log_softmax(Tensor(logits[0, r]), masks[0, r]).data[dest[0, r]]) for r in idle
        )
        u = joint_action_from_arrays(dest[0], busy[0], state)
        return u, DecodedAssignment(
            tuple(int(r) for r in idle), tuple(int(dest[0, r]) for r in idle), steps, float(lp.data[0]), float(ent.data[0])
        )
    out = model.decode(P, locs, queues, mode, rng)
    idle = np.nonzero(out.active[0])[0]
    u = joint_action_from_arrays(out.dest[0], out.serve[0], state)
    return u, DecodedAssignment(
        tuple(int(r) for r in idle),
        tuple(int(out.dest[0, r]) for r in idle),
        tuple(float(out.step_log_probs[0, r]) for r in idle),
        float(out.log_prob[0]),
        float(out.entropy[0]),
    )


def critic_forward(state: SystemState, params: ParameterStore, cfg: ScenarioConfig) -> float:
    model = EAACModel(cfg, params.dtype)
    v = model.value(constants(params), np.asarray([state.locations]), np.asarray([state.queues]))
    return float(v.data[0])


class EAACPolicy(Policy):
    """Deterministic (greedy) or sampling EA-AC controller for simulation."""

    name = "eaac"

    def __init__(self, cfg: ScenarioConfig, params: ParameterStore, mode: str = "greedy"):
        super().__init__(cfg)
        self.params = params
        self.model = EAACModel(cfg, params.dtype)
        self.mode = mode
        self._P = constants(params)

    def act_batch(self, locs, queues, rng=None):
        out = self.model.decode(self._P, locs, queues, self.mode, rng)
        return out.dest, out.serve


# ---------------------------------------------------------------------------
# snapshots


def snapshot(params: ParameterStore, cfg: ScenarioConfig, iteration: int = 0) -> bytes:
    return nx.dumps_store(params, cfg.scenario_hash(), iteration)


def restore(
    blob: bytes, cfg: ScenarioConfig, dtype=np.float64, check_hash: bool = True
) -> tuple[ParameterStore, int]:
    """Parameters and iteration from a snapshot; shapes are always checked
    against ``cfg``, the scenario hash only when ``check_hash``."""
    store, h, iteration = nx.loads_store(blob, dtype)
    if check_hash and h != cfg.scenario_hash():
        raise nx.CheckpointError("checkpoint belongs to a different scenario")
    expected = init_params(cfg, np.random.default_rng(0), dtype)
    for name, value in expected.params.items():
        if name not in store or store[name].shape != value.shape:
            raise nx.CheckpointError(f"parameter {name!r} missing or mis-shaped for this scenario")
    if set(store.names()) != set(expected.names()):
        raise nx.CheckpointError("checkpoint carries unexpected parameters")
    return store, iteration


def load_policy(path, cfg: ScenarioConfig, dtype=np.float64) -> EAACPolicy:
    from pathlib import Path

    store, _ = restore(Path(path).read_bytes(), cfg, dtype)
    return EAACPolicy(cfg, store)
