import json

import numpy as np
import pytest

from pvrp import env
from pvrp.instance import PREFERENCES, ZONE_CONSTRAINTS, Instance
from pvrp.oracle import random_rollout
from pvrp.validator import objective, validate

from conftest import make_instance, mixed_instances


def single(inst):
    batch = env.InstanceBatch.from_instances([inst])
    return batch, env.reset(batch)


def test_reset():
    inst = make_instance([(0.1, 0.2), (0.4, 0.4)], capacities=(5.0, 7.0), speeds=(1.0, 0.5))
    batch, s = single(inst)
    assert s.remaining.tolist() == [[5.0, 7.0]]
    assert s.current.tolist() == [[0, 0]]
    assert s.elapsed.tolist() == [[0.0, 0.0]]
    assert s.routes == [[[0], [0]]]
    assert s.t == 0 and not s.done[0]


def test_empty_instance_done_at_reset():
    inst = Instance(
        id="empty", n=0, m=1, depot=(0.5, 0.5), clients=(), demands=(), capacities=(5.0,), speeds=(1.0,),
        profiles=((),), variant=PREFERENCES, alpha=0.0, dist_kind="random", seed=0,
    )
    inst.check()
    _, s = single(inst)
    assert s.done[0]


def test_zone_mask():
    inst = make_instance(
        [(0.1, 0.1), (0.2, 0.2)], capacities=(5.0, 5.0), speeds=(1.0, 1.0),
        profiles=[[0.0, 1.0], [1.0, 1.0]], variant=ZONE_CONSTRAINTS,
    )
    batch, s = single(inst)
    mask = env.feasible_mask(batch, s)
    assert not mask[0, 0, 1]
    assert mask[0, 0, 2]


def test_capacity_mask():
    inst = make_instance([(0.1, 0.1), (0.2, 0.2)], demands=(5.0, 1.0), capacities=(5.0,))
    batch, s = single(inst)
    s = env.step(batch, s, np.array([[2]]))  # remaining 4
    mask = env.feasible_mask(batch, s)
    assert not mask[0, 0, 1]  # d=5 > o=4


def test_parked_vehicle_must_leave():
    inst = make_instance([(0.1, 0.1)])
    batch, s = single(inst)
    mask = env.feasible_mask(batch, s)
    assert mask[0, 0].tolist() == [False, True]


def test_only_one_vehicle_forced():
    inst = make_instance([(0.1, 0.1), (0.9, 0.9)], capacities=(5.0, 5.0), speeds=(1.0, 1.0))
    batch, s = single(inst)
    mask = env.feasible_mask(batch, s)
    assert mask[0, :, 0].tolist() == [False, True]
    mask = env.feasible_mask(batch, s, priority=np.array([[0.1, 0.7]]))
    assert mask[0, :, 0].tolist() == [True, False]
    # once somebody is out, nobody is forced
    s = env.step(batch, s, np.array([[1, 0]]))
    assert env.feasible_mask(batch, s)[0, :, 0].all()


def test_depot_only_when_nothing_fits():
    inst = make_instance([(0.1, 0.1)], demands=(6.0,), capacities=(3.0, 8.0), speeds=(1.0, 1.0))
    batch, s = single(inst)
    mask = env.feasible_mask(batch, s)
    assert mask[0, 0].tolist() == [True, False]
    assert mask[0, 1].tolist() == [False, True]


def test_mask_on_done_episode_raises():
    inst = make_instance([(0.1, 0.1)])
    batch, s = single(inst)
    s = env.step(batch, s, np.array([[1]]))
    s = env.step(batch, s, np.array([[0]]))
    assert s.done[0]
    with pytest.raises(env.ContractError):
        env.feasible_mask(batch, s)


def test_resolve_conflicts_examples():
    out = env.resolve_conflicts(np.array([3, 3]), np.array([0.6, 0.4]), np.array([0, 2]))
    assert out.tolist() == [3, 2]
    out = env.resolve_conflicts(np.array([3, 3]), np.array([0.5, 0.5]), np.array([1, 2]))
    assert out.tolist() == [3, 2]
    out = env.resolve_conflicts(np.array([0, 0]), np.array([0.9, 0.2]), np.array([1, 2]))
    assert out.tolist() == [0, 0]


def test_resolve_conflicts_three_way():
    out = env.resolve_conflicts(np.array([[4, 4, 4]]), np.array([[0.2, 0.5, 0.3]]), np.array([[1, 2, 3]]))
    assert out.tolist() == [[1, 4, 3]]


def test_step_transitions():
    inst = make_instance([(0.3, 0.4), (0.0, 0.5)], demands=(3.0, 2.0), capacities=(10.0, 10.0), speeds=(1.0, 2.0))
    batch, s = single(inst)
    s1 = env.step(batch, s, np.array([[1, 0]]))
    assert s1.remaining.tolist() == [[7.0, 10.0]]
    assert s1.elapsed[0, 0] == pytest.approx(0.5)
    assert s1.elapsed[0, 1] == 0.0  # stayed: unchanged
    assert s1.routes[0] == [[0, 1], [0]]
    assert s1.demand[0, 1] == 0.0
    s2 = env.step(batch, s1, np.array([[0, 2]]))
    assert s2.remaining.tolist() == [[10.0, 8.0]]  # reload at depot
    assert s2.elapsed[0, 1] == pytest.approx(0.25)


def test_step_rejects_conflict_and_infeasible():
    inst = make_instance([(0.1, 0.1), (0.2, 0.2)], capacities=(5.0, 5.0), speeds=(1.0, 1.0))
    batch, s = single(inst)
    with pytest.raises(env.ContractError):
        env.step(batch, s, np.array([[1, 1]]))
    zone = make_instance(
        [(0.1, 0.1)], capacities=(5.0, 5.0), speeds=(1.0, 1.0), profiles=[[0.0], [1.0]], variant=ZONE_CONSTRAINTS
    )
    batch, s = single(zone)
    with pytest.raises(env.ContractError):
        env.step(batch, s, np.array([[1, 0]]))


def test_runaway_detected():
    inst = make_instance([(0.1, 0.1)], capacities=(5.0, 5.0), speeds=(1.0, 1.0))
    batch, s = single(inst)
    with pytest.raises(env.RunawayEpisodeError):
        for _ in range(env.step_budget(1, 2) + 1):
            s = env.step(batch, s, np.array([[0, 0]]))


def test_terminal_reward_single_client():
    inst = make_instance([(0.5, 0.0)])
    batch, s = single(inst)
    s = env.step(batch, s, np.array([[1]]))
    with pytest.raises(env.ContractError):
        env.terminal_reward(batch, s)
    s = env.step(batch, s, np.array([[0]]))
    assert env.terminal_reward(batch, s)[0] == pytest.approx(-1.0)
    assert env.solution_from(s).routes == [[0, 1, 0]]


def test_random_rollouts_match_validator():
    rng = np.random.default_rng(0)
    for inst in mixed_instances(40, n=6, m=3):
        res = random_rollout(inst, rng)
        assert validate(inst, res.solution).feasible
        assert res.value == pytest.approx(objective(inst, res.solution), rel=1e-12, abs=1e-12)


def test_batched_episodes_independent():
    insts = mixed_instances(8, n=5, m=2)[:3]  # preferences only
    batch = env.InstanceBatch.from_instances(insts)
    s = env.reset(batch)
    rng = np.random.default_rng(3)
    while not s.done.all():
        mask = env.feasible_mask(batch, s)
        u = np.where(mask, rng.random(mask.shape), -1.0)
        a = env.resolve_conflicts(u.argmax(-1), np.ones(mask.shape[:2]), s.current)
        s = env.step(batch, s, a)
    r = env.terminal_reward(batch, s)
    for b, inst in enumerate(insts):
        assert r[b] == pytest.approx(objective(inst, env.solution_from(s, b)), rel=1e-12)


def test_mixed_shapes_rejected():
    a = make_instance([(0.1, 0.1)])
    b = make_instance([(0.1, 0.1), (0.2, 0.2)])
    with pytest.raises(ValueError):
        env.InstanceBatch.from_instances([a, b])


def test_trajectory_dump(tmp_path):
    inst = make_instance([(0.1, 0.1)])
    batch, s = single(inst)
    mask = env.feasible_mask(batch, s)
    rec = env.trajectory_record(s, mask, np.array([[1]]))
    env.write_trajectory(tmp_path / "t.jsonl", [rec])
    back = json.loads((tmp_path / "t.jsonl").read_text())
    assert back["action"] == [1] and back["mask"] == [[0, 1]]
