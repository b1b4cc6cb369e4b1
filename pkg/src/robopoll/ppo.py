"""PPO training of the EA-AC actor and critic.

Rollouts run ``episodes`` independent episodes of ``horizon`` slots in
lockstep from the empty system. The reward of slot ``t`` is minus the
holding cost of the state in which the action was chosen. The critic works
in scaled units (``reward_scale`` times cost) so that its regression targets
stay O(1); curves and buffers report raw costs.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .core import DOMAIN_POLICY, DOMAIN_TRAIN, ContractViolation, ScenarioConfig, arrival_schedule, step_batch, substream
from .eaac import EAACModel, constants, init_params, snapshot
from .numerics import NumericError, ParameterStore, Tape

log = logging.getLogger(__name__)

CURVE_FIELDS = ("iteration", "mean_cost", "actor_loss", "value_loss", "entropy", "clip_fraction", "approx_kl")
INIT_KEY = 0xE1A0


@dataclass
class TrainConfig:
    lr: float = 7e-4
    clip_eps: float = 0.2
    value_coef: float = 0.5
    entropy_coef: float = 1e-3
    max_grad_norm: float = 0.5
    beta: float = 0.99
    gae_lambda: float = 0.95
    epochs: int = 4
    minibatch: int = 256
    horizon: int = 1000
    episodes: int = 8
    iterations: int = 100
    seed: int = 0
    reward_scale: float = 0.01
    dtype: str = "float32"
    checkpoint_every: int = 0

    def __post_init__(self) -> None:
        for name in ("lr", "value_coef", "entropy_coef", "max_grad_norm", "reward_scale"):
            if getattr(self, name) <= 0:
                raise ContractViolation(f"{name} must be positive")
        if not (0.0 < self.clip_eps < 1.0):
            raise ContractViolation("clip_eps must lie in (0, 1)")
        if not (0.0 <= self.gae_lambda <= 1.0):
            raise ContractViolation("gae_lambda must lie in [0, 1]")
        if min(self.epochs, self.minibatch, self.horizon, self.episodes) < 1 or self.iterations < 0:
            raise ContractViolation("epochs, minibatch, horizon, episodes must be >= 1")


@dataclass
class RolloutBuffer:
    """Per-slot arrays with leading axes ``(T, E)``."""

    locs: np.ndarray
    queues: np.ndarray
    dest: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    idle_count: np.ndarray
    bootstrap: np.ndarray
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __len__(self) -> int:
        return self.rewards.size

    def episode_costs(self, beta: float) -> np.ndarray:
        T = self.rewards.shape[0]
        return -(beta ** np.arange(T)) @ self.rewards


def collect_rollouts(
    cfg: ScenarioConfig,
    params: ParameterStore,
    tcfg: TrainConfig,
    iteration: int = 0,
    model: EAACModel | None = None,
) -> RolloutBuffer:
    """Sample ``tcfg.episodes`` episodes with the current parameters."""
    model = model or EAACModel(cfg, params.dtype)
    E, T, M, N = tcfg.episodes, tcfg.horizon, cfg.M, cfg.N
    P = constants(params)
    rng = substream(tcfg.seed, DOMAIN_POLICY, DOMAIN_TRAIN, iteration)
    arrivals = np.stack(
        [arrival_schedule(cfg.rates, tcfg.seed, T, DOMAIN_TRAIN, iteration, e) for e in range(E)], axis=1
    )
    locs = np.tile(np.arange(M, dtype=np.int64), (E, 1))
    queues = np.zeros((E, N), dtype=np.int64)
    buf = RolloutBuffer(
        locs=np.empty((T, E, M), dtype=np.int64),
        queues=np.empty((T, E, N), dtype=np.int64),
        dest=np.empty((T, E, M), dtype=np.int64),
        log_probs=np.empty((T, E)),
        rewards=np.empty((T, E)),
        values=np.empty((T, E)),
        idle_count=np.empty((T, E), dtype=np.int64),
        bootstrap=np.empty(E),
    )
    for t in range(T):
        buf.locs[t] = locs
        buf.queues[t] = queues
        buf.rewards[t] = -queues.sum(axis=1)
        buf.values[t] = model.value(P, locs, queues).data
        out = model.decode(P, locs, queues, "sample", rng)
        buf.dest[t] = out.dest
        buf.log_probs[t] = out.log_prob
        buf.idle_count[t] = out.active.sum(axis=1)
        locs, queues, _ = step_batch(locs, queues, out.dest, out.serve, arrivals[t], cfg.queue_cap)
    buf.bootstrap[:] = model.value(P, locs, queues).data
    return buf


def compute_gae(rewards, values, bootstrap_value, beta: float, lam: float):
    """GAE over the leading (time) axis; extra axes are independent episodes.

    ``delta_t = r_t + beta V_{t+1} - V_t`` with ``V_T = bootstrap_value``;
    ``A_t = sum_l (beta lam)^l delta_{t+l}``; returns ``(A, A + V)``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if rewards.shape != values.shape:
        raise ValueError(f"length mismatch: rewards {rewards.shape} vs values {values.shape}")
    nxt = np.concatenate([values[1:], np.asarray(bootstrap_value, dtype=np.float64)[None]], axis=0)
    delta = rewards + beta * nxt - values
    adv = np.empty_like(delta)
    acc = np.zeros(delta.shape[1:])
    for t in range(delta.shape[0] - 1, -1, -1):
        acc = delta[t] + beta * lam * acc
        adv[t] = acc
    return adv, adv + values


def normalize(adv: np.ndarray) -> np.ndarray:
    if adv.size < 2:
        return adv - adv.mean()
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def clipped_surrogate(ratio, adv, eps: float):
    """Per-sample ``min(r A, clip(r, 1-eps, 1+eps) A)`` on plain arrays."""
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv)


def ppo_loss(model: EAACModel, P, batch: dict, tcfg: TrainConfig):
    """Build the PPO loss on a tape-recorded minibatch; returns ``(loss, stats)``."""
    logp, ent = model.score(P, batch["locs"], batch["queues"], batch["dest"])
    dt = model.dtype
    adv = nx.Tensor(batch["adv"].astype(dt))
    ratio = nx.exp(nx.sub(logp, nx.Tensor(batch["logp_old"].astype(dt))))
    surr = nx.minimum(nx.mul(ratio, adv), nx.mul(nx.clip(ratio, 1 - tcfg.clip_eps, 1 + tcfg.clip_eps), adv))
    actor_loss = nx.scale(nx.mean(surr), -1.0)
    v = model.value(P, batch["locs"], batch["queues"])
    value_loss = nx.mean(nx.square(nx.sub(v, nx.Tensor(batch["ret"].astype(dt)))))
    ent_mean = nx.mean(ent)
    loss = nx.add(
        nx.add(actor_loss, nx.scale(value_loss, tcfg.value_coef)), nx.scale(ent_mean, -tcfg.entropy_coef)
    )
    r = ratio.data
    lr_ = logp.data - batch["logp_old"]
    stats = {
        "actor_loss": float(actor_loss.data),
        "value_loss": float(value_loss.data),
        "entropy": float(ent_mean.data),
        "clip_fraction": float(np.mean(np.abs(r - 1.0) > tcfg.clip_eps)),
        "approx_kl": float(np.mean((r - 1.0) - lr_)),
        "ratio_max_dev": float(np.max(np.abs(r - 1.0))),
    }
    return loss, stats


def finish_buffer(buf: RolloutBuffer, tcfg: TrainConfig) -> RolloutBuffer:
    adv, ret = compute_gae(
        buf.rewards * tcfg.reward_scale, buf.values, buf.bootstrap, tcfg.beta, tcfg.gae_lambda
    )
    buf.advantages, buf.returns = adv, ret
    return buf


def ppo_update(
    buf: RolloutBuffer,
    params: ParameterStore,
    tcfg: TrainConfig,
    cfg: ScenarioConfig,
    iteration: int = 0,
    model: EAACModel | None = None,
) -> tuple[ParameterStore, dict]:
    """Clipped-surrogate epochs over shuffled minibatches (updates ``params`` in place)."""
    model = model or EAACModel(cfg, params.dtype)
    if buf.advantages is None:
        finish_buffer(buf, tcfg)
    n = len(buf)
    flat = {
        "locs": buf.locs.reshape(n, -1),
        "queues": buf.queues.reshape(n, -1),
        "dest": buf.dest.reshape(n, -1),
        "logp_old": buf.log_probs.reshape(n),
        "adv": normalize(buf.advantages.reshape(n)),
        "ret": buf.returns.reshape(n),
    }
    rng = substream(tcfg.seed, DOMAIN_TRAIN, iteration, 0xB47C)
    history = []
    for epoch in range(tcfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, tcfg.minibatch):
            idx = perm[start : start + tcfg.minibatch]
            batch = {k: v[idx] for k, v in flat.items()}
            leaves = params.leaves()
            with Tape() as tape:
                loss, st = ppo_loss(model, leaves, batch, tcfg)
            if not np.isfinite(loss.data):
                raise NumericError(f"non-finite PPO loss at iteration {iteration}, epoch {epoch}: {st}")
            grads = tape.backward(loss, leaves)
            grads, norm = nx.clip_global_norm(grads, tcfg.max_grad_norm)
            nx.adam_step(params, grads, tcfg.lr)
            st["grad_norm"] = norm
            history.append(st)
    stats = {k: float(np.mean([h[k] for h in history])) for k in history[0]}
    stats["first_ratio_max_dev"] = history[0]["ratio_max_dev"]
    return params, stats


@dataclass
class TrainResult:
    params: ParameterStore
    curve: list[dict] = field(default_factory=list)


def train(
    cfg: ScenarioConfig,
    tcfg: TrainConfig,
    out_dir: str | Path | None = None,
    params: ParameterStore | None = None,
) -> TrainResult:
    """Alternate rollouts and PPO updates; optional checkpoints and curve CSV in ``out_dir``."""
    dtype = np.dtype(tcfg.dtype)
    if params is None:
        params = init_params(cfg, substream(tcfg.seed, DOMAIN_TRAIN, INIT_KEY), dtype)
    model = EAACModel(cfg, dtype)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    curve = []
    for it in range(tcfg.iterations):
        buf = finish_buffer(collect_rollouts(cfg, params, tcfg, it, model), tcfg)
        _, st = ppo_update(buf, params, tcfg, cfg, it, model)
        row = {"iteration": it, "mean_cost": float(buf.episode_costs(tcfg.beta).mean())}
        row.update({k: st[k] for k in CURVE_FIELDS if k in st})
        curve.append(row)
        log.info("iter %d cost %.2f vloss %.4f ent %.3f", it, row["mean_cost"], st["value_loss"], st["entropy"])
        if out is not None and tcfg.checkpoint_every and (it + 1) % tcfg.checkpoint_every == 0:
            (out / f"ckpt_{it + 1:05d}.bin").write_bytes(snapshot(params, cfg, it + 1))
    if out is not None:
        (out / "final.bin").write_bytes(snapshot(params, cfg, tcfg.iterations))
        write_curve(curve, out / "curve.csv")
        (out / "train_config.json").write_text(_config_json(tcfg))
    return TrainResult(params, curve)


def _config_json(tcfg: TrainConfig) -> str:
    import json

    return json.dumps(asdict(tcfg), indent=2, sort_keys=True) + "\n"


def write_curve(curve: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(CURVE_FIELDS), lineterminator="\n")
        w.writeheader()
        for row in curve:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
