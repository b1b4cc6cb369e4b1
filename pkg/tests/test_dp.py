import itertools

import numpy as np
import pytest

from robopoll.core import ContractViolation, Convention, JointAction, ScenarioConfig, SystemState, check_joint_action, feasible_robot_actions, step
from robopoll.dp import (
    DPPolicy,
    InstanceTooLarge,
    bellman_backup,
    bellman_residual,
    decode_action,
    encode_action,
    enumerate_states,
    joint_actions,
    load_table,
    monotonicity_violations,
    save_table,
    value_iteration,
)
from robopoll.evaluation import evaluate


def all_joint_actions(state: SystemState, cfg: ScenarioConfig) -> list[JointAction]:
    """Every admissible exhaustive joint action, built from per-robot sets."""
    per = [sorted(feasible_robot_actions(state, r, (), cfg), key=repr) for r in range(cfg.M)]
    out = []
    for combo in itertools.product(*per):
        u = JointAction(tuple(combo))
        try:
            check_joint_action(state, u, cfg, exhaustive=True)
        except ContractViolation:
            continue
        out.append(u)
    return out


def reference_value_iteration(cfg: ScenarioConfig, sweeps: int) -> dict[SystemState, float]:
    """Dictionary value iteration driven by the scalar ``step`` function."""
    N, cap = cfg.N, cfg.queue_cap
    states = [
        SystemState(locs, xs)
        for locs in itertools.permutations(range(N), cfg.M)
        for xs in itertools.product(range(cap + 1), repeat=N)
    ]
    outcomes = []
    for a in itertools.product((0, 1), repeat=N):
        prob = float(np.prod([p if ai else 1 - p for ai, p in zip(a, cfg.arrival_rates)]))
        outcomes.append((a, prob))
    model = {
        s: [[(prob, step(s, u, a, cfg).state) for a, prob in outcomes] for u in all_joint_actions(s, cfg)]
        for s in states
    }
    V = {s: 0.0 for s in states}
    for _ in range(sweeps):
        V = {
            s: sum(s.queues) + cfg.beta * min(sum(p * V[t] for p, t in succ) for succ in model[s])
            for s in states
        }
    return V


@pytest.mark.parametrize(
    "cfg",
    [
        ScenarioConfig(1, 2, (0.3, 0.5), beta=0.9, queue_cap=3),
        ScenarioConfig(2, 3, (0.2, 0.4, 0.5), beta=0.8, queue_cap=2),
        ScenarioConfig(2, 3, (0.2, 0.4, 0.5), beta=0.8, queue_cap=2, convention=Convention.LOOSE),
    ],
    ids=["m1n2", "m2n3", "m2n3-loose"],
)
def test_value_iteration_matches_dictionary_oracle(cfg):
    table = value_iteration(cfg, cfg.queue_cap, tol=1e-11)
    sweeps = 300 if cfg.beta == 0.9 else 150
    ref = reference_value_iteration(cfg, sweeps)
    idx = enumerate_states(cfg, cfg.queue_cap)
    for s, v in ref.items():
        assert table.values[idx.encode(s)] == pytest.approx(v, abs=1e-8)


def test_two_step_hand_expansion():
    # M=1, N=1, p=1/2, cap 2, V0 = 0:
    # V1(x) = x; V2(0) = 0 + b*E[V1(a)] = b/2; V2(1): serve, next x = a, = 1 + b/2
    # V2(2): serve, next 1 + a, = 2 + b*1.5
    b = 0.9
    cfg = ScenarioConfig(1, 1, (0.5,), beta=b)
    t = value_iteration(cfg, 2, tol=1e-12, max_iters=2)
    assert t.iterations == 2
    assert t.values.tolist() == pytest.approx([b / 2, 1 + b / 2, 2 + 1.5 * b])


def test_single_queue_closed_form():
    p, b = 0.5, 0.99
    cfg = ScenarioConfig(1, 1, (p,), beta=b, horizon=1000)
    t = value_iteration(cfg, 4, tol=1e-10)
    assert t.values[0] == pytest.approx(p * b / (1 - b), abs=1e-7)
    # simulated discounted cost agrees within its CI
    rep = evaluate(cfg, DPPolicy(t, cfg), runs=400)
    assert abs(rep.mean_cost - p * b / (1 - b)) <= rep.ci_cost


def test_residual_and_greedy_consistency():
    cfg = ScenarioConfig(2, 3, (0.15, 0.3, 0.45), beta=0.95)
    t = value_iteration(cfg, 5, tol=1e-9)
    assert t.converged
    assert bellman_residual(t, cfg) <= 1e-9
    idx = enumerate_states(cfg, 5)
    rng = np.random.default_rng(0)
    for k in rng.integers(0, idx.num_states, 60):
        s = idx.decode(int(k))
        v, u = bellman_backup(s, t, cfg, idx)
        assert v == pytest.approx(t.values[k], abs=1e-8)
        assert encode_action(u, cfg.N) == t.policy[k]


def test_monotone_in_queue_lengths():
    cfg = ScenarioConfig(1, 3, (0.1, 0.25, 0.45))
    t = value_iteration(cfg, 8, tol=1e-8)
    assert monotonicity_violations(t, cfg) == 0


def test_indexer_roundtrip():
    cfg = ScenarioConfig(2, 3, (0.1,) * 3)
    idx = enumerate_states(cfg, 3)
    assert idx.num_states == 6 * 64
    for k in range(idx.num_states):
        assert idx.encode(idx.decode(k)) == k
    assert idx.encode(SystemState((0, 1), (9, 0, 0))) == idx.encode(SystemState((0, 1), (3, 0, 0)))
    assert idx.encode(SystemState((0, 1), (0, 0, 0))) == 0


def test_action_codes_roundtrip_and_order():
    cfg = ScenarioConfig(2, 3, (0.1,) * 3)
    acts = joint_actions((0, 1), (False, True), 3, cfg.convention)
    codes = [c for c, _, _ in acts]
    assert codes == sorted(codes)
    for c, dest, serve in acts:
        u = decode_action(c, 2, 3)
        assert encode_action(u, 3) == c
        assert u.destinations(SystemState((0, 1), (0, 1, 0))) == dest
    # idle is the smallest code for an idle robot
    assert acts[0][1] == (0, 1)


def test_non_exhaustive_search_is_no_worse():
    cfg = ScenarioConfig(1, 3, (0.1, 0.25, 0.45), beta=0.95)
    ex = value_iteration(cfg, 6, tol=1e-9)
    full = value_iteration(cfg, 6, tol=1e-9, exhaustive=False)
    assert np.all(full.values <= ex.values + 1e-9)


def test_instance_too_large():
    with pytest.raises(InstanceTooLarge):
        enumerate_states(ScenarioConfig(3, 12, (0.1,) * 12), 10)


def test_table_roundtrip(tmp_path):
    cfg = ScenarioConfig(1, 2, (0.2, 0.3), beta=0.9)
    t = value_iteration(cfg, 4, tol=1e-9)
    save_table(t, tmp_path / "t.bin")
    t2 = load_table(tmp_path / "t.bin", cfg)
    assert np.array_equal(t.values, t2.values) and np.array_equal(t.policy, t2.policy)
    assert (t2.cap, t2.iterations, t2.converged) == (t.cap, t.iterations, t.converged)
    with pytest.raises(ContractViolation):
        load_table(tmp_path / "t.bin", ScenarioConfig(1, 2, (0.2, 0.35), beta=0.9))


def test_dp_policy_clamps_above_cap():
    cfg = ScenarioConfig(1, 2, (0.2, 0.3), beta=0.9)
    t = value_iteration(cfg, 3, tol=1e-9)
    pol = DPPolicy(t, cfg)
    assert pol(SystemState((0,), (0, 50))) == pol(SystemState((0,), (0, 3)))
