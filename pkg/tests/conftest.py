import numpy as np
import pytest

from pvrp.instance import PREFERENCES, ZONE_CONSTRAINTS, GenConfig, Instance, generate

ACCEPTANCE_LINES: list[str] = []


def make_instance(
    clients,
    depot=(0.0, 0.0),
    demands=None,
    capacities=(10.0,),
    speeds=(1.0,),
    profiles=None,
    variant=PREFERENCES,
    alpha=0.0,
    id="hand",
):
    clients = tuple(tuple(float(v) for v in c) for c in clients)
    n, m = len(clients), len(capacities)
    if demands is None:
        demands = (1.0,) * n
    if profiles is None:
        fill = 1.0 if variant == ZONE_CONSTRAINTS else 0.0
        profiles = [[fill] * n for _ in range(m)]
    inst = Instance(
        id=id,
        n=n,
        m=m,
        depot=tuple(float(v) for v in depot),
        clients=clients,
        demands=tuple(float(d) for d in demands),
        capacities=tuple(float(q) for q in capacities),
        speeds=tuple(float(s) for s in speeds),
        profiles=tuple(tuple(float(v) for v in row) for row in profiles),
        variant=variant,
        alpha=float(alpha),
        dist_kind="zone" if variant == ZONE_CONSTRAINTS else "random",
        seed=0,
    )
    inst.check()
    return inst


def mixed_instances(count, n=5, m=2, seed=0):
    """Instances cycling through every distribution (zone ones use the zone variant)."""
    kinds = [("random", PREFERENCES), ("angle", PREFERENCES), ("cluster", PREFERENCES), ("zone", ZONE_CONSTRAINTS)]
    out = []
    for i in range(count):
        kind, variant = kinds[i % 4]
        alpha = (0.0, 0.1, 0.2)[(i // 4) % 3]
        out.append(generate(GenConfig(n=n, m=m, dist_kind=kind, variant=variant, alpha=alpha, seed=seed * 100003 + i)))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
