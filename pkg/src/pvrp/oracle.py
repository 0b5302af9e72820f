"""Reference solvers for tiny instances: exact search, greedy and random."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import env as envlib
from .instance import Instance
from .validator import Solution, objective

MAX_EXACT_N = 8
MAX_EXACT_M = 3


class OracleRefused(ValueError):
    pass


@dataclass
class OracleResult:
    solution: Solution
    value: float
    nodes_explored: int = 0

    def to_json(self) -> str:
        return json.dumps(
            {"routes": self.solution.routes, "value": self.value, "nodes_explored": self.nodes_explored}
        )


def exact_supported(instance: Instance) -> bool:
    return instance.n <= MAX_EXACT_N and instance.m <= MAX_EXACT_M


def _arc_tables(instance: Instance):
    dist = instance.distance_matrix().tolist()
    prof = instance.node_profiles()
    if instance.is_zone:
        gain = np.zeros_like(prof)
        allowed = prof == 1.0
    else:
        gain = instance.alpha * prof
        allowed = np.ones_like(prof, dtype=bool)
    return dist, gain.tolist(), allowed.tolist()


def exact_solve(instance: Instance) -> OracleResult:
    """Exhaustive optimum over all multi-trip solutions.

    Vehicles are routed one after another; vehicle k moves one node at a time
    (client, reload at the depot, or finish while at the depot).  Since the
    objective only depends on the final routes, this covers every solution.
    Subproblems are memoized on (vehicle, served set, position, remaining
    capacity); capacities are sums of the exact demand values, so the key is
    exact.
    """
    n, m = instance.n, instance.m
    if not exact_supported(instance):
        raise OracleRefused(f"exact_solve supports n <= {MAX_EXACT_N}, m <= {MAX_EXACT_M}; got n={n}, m={m}")
    dist, gain, allowed = _arc_tables(instance)
    demand = [0.0] + list(instance.demands)
    cap0 = list(instance.capacities)
    speed = list(instance.speeds)
    full = (1 << n) - 1
    memo: dict[tuple, tuple[float, tuple | None]] = {}

    def best(k: int, served: int, pos: int, cap: float) -> float:
        key = (k, served, pos, cap)
        hit = memo.get(key)
        if hit is not None:
            return hit[0]
        value, arg = -math.inf, None
        if pos == 0:
            # finish vehicle k here
            if k + 1 < m:
                v = best(k + 1, served, 0, cap0[k + 1])
            else:
                v = 0.0 if served == full else -math.inf
            if v > value:
                value, arg = v, ("finish",)
        else:
            v = -dist[pos][0] / speed[k] + best(k, served, 0, cap0[k])
            if v > value:
                value, arg = v, ("move", 0)
        for j in range(1, n + 1):
            bit = 1 << (j - 1)
            if served & bit or demand[j] > cap or not allowed[k][j]:
                continue
            v = gain[k][j] - dist[pos][j] / speed[k] + best(k, served | bit, j, cap - demand[j])
            if v > value:
                value, arg = v, ("move", j)
        memo[key] = (value, arg)
        return value

    value = best(0, 0, 0, cap0[0])
    if value == -math.inf:
        raise ValueError(f"instance {instance.id!r} has no feasible solution")

    routes: list[list[int]] = [[0] for _ in range(m)]
    k, served, pos, cap = 0, 0, 0, cap0[0]
    while True:
        _, arg = memo[(k, served, pos, cap)]
        if arg[0] == "finish":
            if k + 1 == m:
                break
            k, pos, cap = k + 1, 0, cap0[k + 1]
            continue
        j = arg[1]
        routes[k].append(j)
        if j == 0:
            cap = cap0[k]
        else:
            served |= 1 << (j - 1)
            cap -= demand[j]
        pos = j
    solution = Solution(routes=routes)
    return OracleResult(solution=solution, value=objective(instance, solution), nodes_explored=len(memo))


def greedy_solve(instance: Instance) -> OracleResult:
    """Myopic constructor: always take the best single (vehicle, client) move.

    A move's score is alpha * p_jk - c(cur, j) / s_k (the preference part is
    dropped under zone constraints).  A vehicle away from the depot with no
    client that fits its remaining load goes back to reload.
    """
    n, m = instance.n, instance.m
    dist, gain, allowed = _arc_tables(instance)
    demand = [0.0] + list(instance.demands)
    speed = list(instance.speeds)
    cap = list(instance.capacities)
    pos = [0] * m
    routes = [[0] for _ in range(m)]
    unserved = set(range(1, n + 1))
    moves = 0

    while unserved:
        best_move, best_score = None, -math.inf
        for k in range(m):
            fits = [j for j in sorted(unserved) if demand[j] <= cap[k] and allowed[k][j]]
            if not fits and pos[k] != 0:
                routes[k].append(0)
                pos[k], cap[k] = 0, instance.capacities[k]
                fits = [j for j in sorted(unserved) if demand[j] <= cap[k] and allowed[k][j]]
            for j in fits:
                score = gain[k][j] - dist[pos[k]][j] / speed[k]
                if score > best_score:
                    best_move, best_score = (k, j), score
        if best_move is None:
            raise ValueError(f"instance {instance.id!r}: no vehicle can serve {sorted(unserved)}")
        k, j = best_move
        routes[k].append(j)
        pos[k] = j
        cap[k] -= demand[j]
        unserved.discard(j)
        moves += 1

    for k in range(m):
        if routes[k][-1] != 0:
            routes[k].append(0)
    solution = Solution(routes=routes)
    return OracleResult(solution=solution, value=objective(instance, solution), nodes_explored=moves)


def random_rollout(instance: Instance, rng: np.random.Generator) -> OracleResult:
    """Environment rollout picking uniformly among each vehicle's feasible actions."""
    batch = envlib.InstanceBatch.from_instances([instance])
    state = envlib.reset(batch)
    steps = 0
    while not state.done.all():
        mask = envlib.feasible_mask(batch, state, priority=rng.random(state.current.shape))
        # uniform choice: random scores restricted to feasible entries
        u = rng.random(mask.shape)
        u[~mask] = -1.0
        action = u.argmax(-1)
        probs = 1.0 / mask.sum(-1)
        action = envlib.resolve_conflicts(action, probs, state.current)
        state = envlib.step(batch, state, action)
        steps += 1
    solution = envlib.solution_from(state, 0)
    value = float(envlib.terminal_reward(batch, state)[0])
    return OracleResult(solution=solution, value=value, nodes_explored=steps)
