"""Route-level feasibility checks and objective evaluation.

Routes are per-vehicle node sequences starting and ending at the depot (node
0); interior depot visits split a route into trips.  Flow conservation and
subtour elimination hold by construction of this representation, so only the
constraints that a route list can actually violate are checked here.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .instance import Instance

CONSTRAINTS = ("visit-once", "capacity", "flow", "zone", "route-shape")


class StructuralError(ValueError):
    """The solution does not even index valid nodes/vehicles."""


class InfeasibleSolutionError(ValueError):
    pass


@dataclass
class Solution:
    routes: list[list[int]]

    def to_json(self) -> str:
        return json.dumps({"routes": [[int(v) for v in r] for r in self.routes]})

    @classmethod
    def from_json(cls, text: str) -> "Solution":
        data = json.loads(text)
        return cls(routes=[[int(v) for v in r] for r in data["routes"]])


@dataclass
class ValidationReport:
    violations: list[tuple[str, str]] = field(default_factory=list)

    @property
    def feasible(self) -> bool:
        return not self.violations

    def add(self, constraint: str, detail: str) -> None:
        assert constraint in CONSTRAINTS
        self.violations.append((constraint, detail))

    def __str__(self) -> str:
        if self.feasible:
            return "feasible"
        return "infeasible: " + "; ".join(f"[{c}] {d}" for c, d in self.violations)


def _check_structure(instance: Instance, solution: Solution) -> None:
    if len(solution.routes) != instance.m:
        raise StructuralError(f"expected {instance.m} routes, got {len(solution.routes)}")
    for k, route in enumerate(solution.routes):
        for v in route:
            if not 0 <= v <= instance.n:
                raise StructuralError(f"vehicle {k}: node {v} out of range 0..{instance.n}")


def validate(instance: Instance, solution: Solution) -> ValidationReport:
    _check_structure(instance, solution)
    report = ValidationReport()
    seen: dict[int, int] = {}

    for k, route in enumerate(solution.routes):
        if not route:
            continue
        if route[0] != 0 or route[-1] != 0:
            report.add("route-shape", f"vehicle {k}: route must start and end at the depot")
        for a, b in zip(route, route[1:]):
            # depot -> depot is an idle step, not a self-loop arc
            if a == b and a != 0:
                report.add("route-shape", f"vehicle {k}: self-loop at node {a}")
        load = 0.0
        for v in route:
            if v == 0:
                load = 0.0
                continue
            if v in seen:
                report.add("visit-once", f"client {v} visited by vehicle {seen[v]} and vehicle {k}")
            else:
                seen[v] = k
            load += instance.demands[v - 1]
            if load > instance.capacities[k]:
                report.add("capacity", f"vehicle {k}: trip load {load:g} exceeds capacity {instance.capacities[k]:g}")
                load = -math.inf  # report each overloaded trip once
            if instance.is_zone and instance.profiles[k][v - 1] != 1.0:
                report.add("zone", f"vehicle {k} may not serve client {v}")

    missing = [i for i in range(1, instance.n + 1) if i not in seen]
    if missing:
        report.add("visit-once", f"clients never visited: {missing}")
    return report


def route_duration(instance: Instance, k: int, route) -> float:
    """Total Euclidean length of ``route`` divided by vehicle k's speed."""
    pts = (instance.depot,) + instance.clients
    total = 0.0
    for a, b in zip(route, route[1:]):
        (x0, y0), (x1, y1) = pts[a], pts[b]
        total += math.hypot(x1 - x0, y1 - y0)
    return total / instance.speeds[k]


def route_preference(instance: Instance, k: int, route) -> float:
    """Sum of vehicle k's profile over the tail node of every arc (depot scores 0)."""
    total = 0.0
    for a in route[:-1]:
        if a != 0:
            total += instance.profiles[k][a - 1]
    return total


def totals(instance: Instance, solution: Solution) -> tuple[float, float]:
    """(total duration, total preference) of a solution."""
    cost = sum(route_duration(instance, k, r) for k, r in enumerate(solution.routes))
    pref = sum(route_preference(instance, k, r) for k, r in enumerate(solution.routes))
    return cost, pref


def reward_from_totals(instance: Instance, cost: float, pref: float) -> float:
    if instance.is_zone:
        return -cost
    return instance.alpha * pref - cost


def objective(instance: Instance, solution: Solution, check: bool = True) -> float:
    """Value to maximize: alpha * preference - duration (or -duration under zones)."""
    if check:
        report = validate(instance, solution)
        if not report.feasible:
            raise InfeasibleSolutionError(str(report))
    cost, pref = totals(instance, solution)
    return reward_from_totals(instance, cost, pref)
