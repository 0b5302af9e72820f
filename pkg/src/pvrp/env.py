"""Parallel multi-vehicle construction environment for PVRP.

Every step, each vehicle proposes one target node.  Clients claimed by more
than one vehicle go to the vehicle with the highest selection probability and
the losers stay where they are.  The environment is batched: all arrays carry
a leading episode axis ``B`` and every episode in a batch shares (n, m).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .instance import Instance
from .validator import Solution


class ContractError(RuntimeError):
    pass


class RunawayEpisodeError(RuntimeError):
    pass


@dataclass
class InstanceBatch:
    instances: list[Instance]
    coords: np.ndarray  # (B, n+1, 2)
    dist: np.ndarray  # (B, n+1, n+1)
    demand: np.ndarray  # (B, n+1), depot demand 0
    capacity: np.ndarray  # (B, m)
    speed: np.ndarray  # (B, m)
    profile: np.ndarray  # (B, m, n+1), depot column included
    alpha: np.ndarray  # (B,)
    zone: np.ndarray  # (B,) bool

    @property
    def size(self) -> int:
        return len(self.instances)

    @property
    def n(self) -> int:
        return self.demand.shape[1] - 1

    @property
    def m(self) -> int:
        return self.capacity.shape[1]

    @classmethod
    def from_instances(cls, instances) -> "InstanceBatch":
        instances = list(instances)
        if not instances:
            raise ValueError("empty batch")
        shapes = {(i.n, i.m) for i in instances}
        if len(shapes) != 1:
            raise ValueError(f"all instances in a batch must share (n, m); got {sorted(shapes)}")
        coords = np.stack([i.coords() for i in instances])
        diff = coords[:, :, None, :] - coords[:, None, :, :]
        return cls(
            instances=instances,
            coords=coords,
            dist=np.sqrt((diff**2).sum(-1)),
            demand=np.stack([i.node_demands() for i in instances]),
            capacity=np.array([i.capacities for i in instances], dtype=np.float64).reshape(len(instances), -1),
            speed=np.array([i.speeds for i in instances], dtype=np.float64).reshape(len(instances), -1),
            profile=np.stack([i.node_profiles() for i in instances]),
            alpha=np.array([i.alpha for i in instances], dtype=np.float64),
            zone=np.array([i.is_zone for i in instances]),
        )


@dataclass
class State:
    remaining: np.ndarray  # o_k, (B, m)
    elapsed: np.ndarray  # T_k, (B, m)
    collected: np.ndarray  # preference gathered per vehicle, (B, m)
    current: np.ndarray  # (B, m) int
    demand: np.ndarray  # remaining demand, (B, n+1)
    routes: list[list[list[int]]]
    t: int
    done: np.ndarray  # (B,) bool

    def copy(self) -> "State":
        return State(
            remaining=self.remaining.copy(),
            elapsed=self.elapsed.copy(),
            collected=self.collected.copy(),
            current=self.current.copy(),
            demand=self.demand.copy(),
            routes=[[list(r) for r in ep] for ep in self.routes],
            t=self.t,
            done=self.done.copy(),
        )


def step_budget(n: int, m: int) -> int:
    return 2 * (n + 2 * m) + 4


def _done(state_demand: np.ndarray, current: np.ndarray) -> np.ndarray:
    return (state_demand[:, 1:] <= 0).all(axis=1) & (current == 0).all(axis=1)


def reset(batch: InstanceBatch) -> State:
    B, m = batch.size, batch.m
    current = np.zeros((B, m), dtype=np.int64)
    demand = batch.demand.copy()
    return State(
        remaining=batch.capacity.copy(),
        elapsed=np.zeros((B, m)),
        collected=np.zeros((B, m)),
        current=current,
        demand=demand,
        routes=[[[0] for _ in range(m)] for _ in range(B)],
        t=0,
        done=_done(demand, current),
    )


def open_mask(batch: InstanceBatch, state: State) -> np.ndarray:
    """Feasibility before the progress rule, (B, m, n+1); True = feasible.

    Client j is open to vehicle k iff it is unserved, fits k's remaining
    load and (under zone constraints) k is permitted to serve it.  The depot
    is always open.  Finished episodes get a depot-only row.
    """
    if state.done.all():
        raise ContractError("feasible_mask called on a finished episode")
    d = state.demand[:, None, :]  # (B, 1, n+1)
    mask = (d > 0) & (d <= state.remaining[:, :, None])
    zone = batch.zone[:, None, None]
    mask &= ~zone | (batch.profile == 1.0)
    mask[:, :, 0] = True
    mask[state.done] = False
    mask[state.done, :, 0] = True
    return mask


def forced_vehicle(mask: np.ndarray, state: State, priority: np.ndarray | None = None) -> np.ndarray:
    """Vehicle that must leave the depot this step, or -1, per episode (B,).

    Only when every vehicle is parked at the depot does one of them have to
    go: the highest-priority vehicle with an open client (ties -> lower
    index).  Without a priority the lowest index wins.
    """
    B, m = state.current.shape
    eligible = (state.current == 0) & mask[:, :, 1:].any(-1)
    all_parked = (state.current == 0).all(axis=1) & ~state.done
    if priority is None:
        priority = np.zeros((B, m))
    score = np.where(eligible, np.asarray(priority, dtype=np.float64), -np.inf)
    k = score.argmax(axis=1)  # argmax takes the first maximum
    ok = all_parked & eligible.any(axis=1)
    return np.where(ok, k, -1)


def apply_progress_rule(mask: np.ndarray, state: State, priority: np.ndarray | None = None) -> np.ndarray:
    mask = mask.copy()
    k = forced_vehicle(mask, state, priority)
    b = np.flatnonzero(k >= 0)
    mask[b, k[b], 0] = False
    return mask


def feasible_mask(batch: InstanceBatch, state: State, priority: np.ndarray | None = None) -> np.ndarray:
    """Boolean (B, m, n+1) mask of allowed targets; True = feasible.

    ``open_mask`` plus the progress rule: when all vehicles are parked and
    clients remain, the depot is closed for one vehicle (see
    ``forced_vehicle``), so every step moves at least one vehicle.
    """
    return apply_progress_rule(open_mask(batch, state), state, priority)


def resolve_conflicts(action: np.ndarray, probs: np.ndarray, current: np.ndarray) -> np.ndarray:
    """Give each contested client to the most confident vehicle.

    ``action``, ``probs`` and ``current`` are (B, m) (a single episode may
    pass (m,) arrays).  Losers fall back to their current node; exact ties go
    to the lower vehicle index.  The depot is never contested.
    """
    action = np.asarray(action)
    single = action.ndim == 1
    if single:
        action, probs, current = action[None], np.asarray(probs)[None], np.asarray(current)[None]
    out = action.copy()
    m = action.shape[1]
    lose = np.zeros(action.shape, dtype=bool)
    for k in range(m):
        for l in range(m):
            if l == k:
                continue
            same = (action[:, k] == action[:, l]) & (action[:, k] != 0)
            beats = (probs[:, l] > probs[:, k]) | ((probs[:, l] == probs[:, k]) & (l < k))
            lose[:, k] |= same & beats
    out[lose] = current[lose]
    return out[0] if single else out


def step(batch: InstanceBatch, state: State, action: np.ndarray, check: bool = True) -> State:
    """Apply a conflict-free joint action; returns a new State."""
    action = np.asarray(action, dtype=np.int64).reshape(state.current.shape)
    B, m = action.shape
    if check:
        if state.done.all():
            raise ContractError("step called on a finished episode")
        mask = open_mask(batch, state)
        picked = np.take_along_axis(mask, action[:, :, None], axis=2)[:, :, 0]
        bad = ~(picked | (action == state.current))
        if bad.any():
            b, k = map(int, np.argwhere(bad)[0])
            raise ContractError(f"episode {b}: vehicle {k} cannot move to node {action[b, k]}")
        clients = np.where(action > 0, action, -np.arange(1, m + 1)[None, :])
        moving = action != state.current
        for b in range(B):
            taken = clients[b][moving[b] & (action[b] > 0)]
            if len(set(taken.tolist())) != len(taken):
                raise ContractError(f"episode {b}: conflicting joint action {action[b].tolist()}")

    new = state.copy()
    cur = state.current
    # finished episodes are frozen
    action = np.where(state.done[:, None], cur, action)
    moving = action != cur
    rows = np.arange(B)[:, None]
    arc = batch.dist[rows, cur, action]  # (B, m)
    new.elapsed = state.elapsed + np.where(moving, arc / batch.speed, 0.0)

    to_client = moving & (action > 0)
    to_depot = moving & (action == 0)
    d = state.demand[rows, action]
    gain = np.take_along_axis(batch.profile, action[:, :, None], axis=2)[:, :, 0]
    new.collected = state.collected + np.where(to_client & ~batch.zone[:, None], gain, 0.0)
    new.remaining = np.where(to_client, state.remaining - d, state.remaining)
    new.remaining = np.where(to_depot, batch.capacity, new.remaining)
    bb, kk = np.nonzero(to_client)
    new.demand[bb, action[bb, kk]] = 0.0
    new.current = action
    for b, k in zip(*np.nonzero(moving)):
        new.routes[b][k].append(int(action[b, k]))
    new.t = state.t + 1
    new.done = _done(new.demand, new.current)
    if new.t > step_budget(batch.n, batch.m) and not new.done.all():
        raise RunawayEpisodeError(f"episode exceeded {step_budget(batch.n, batch.m)} steps")
    return new


def terminal_reward(batch: InstanceBatch, state: State) -> np.ndarray:
    """Per-episode final reward (B,), accumulated from the transition updates."""
    if not state.done.all():
        raise ContractError("terminal_reward called before every episode finished")
    cost = state.elapsed.sum(axis=1)
    pref = state.collected.sum(axis=1)
    return np.where(batch.zone, -cost, batch.alpha * pref - cost)


def solution_from(state: State, b: int = 0) -> Solution:
    if not state.done[b]:
        raise ContractError(f"episode {b} is not finished")
    routes = []
    for r in state.routes[b]:
        r = list(r)
        assert r[-1] == 0, "finished episode with a vehicle away from the depot"
        routes.append(r)
    return Solution(routes=routes)


def trajectory_record(state: State, mask: np.ndarray, action: np.ndarray, b: int = 0) -> dict:
    """One debugging record (JSON-ready) for episode ``b`` at the current step."""
    return {
        "t": state.t,
        "current": state.current[b].tolist(),
        "remaining": state.remaining[b].tolist(),
        "elapsed": state.elapsed[b].tolist(),
        "unserved": [int(j) for j in np.flatnonzero(state.demand[b] > 0)],
        "mask": mask[b].astype(int).tolist(),
        "action": np.asarray(action)[b].tolist(),
    }


def write_trajectory(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
