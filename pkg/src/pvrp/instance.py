"""PVRP instances: data model, profile generators and JSONL serialization.

An instance has a depot, ``n`` clients with integer-valued demands and ``m``
heterogeneous vehicles (capacity, speed).  The profile matrix ``profiles`` is
``m x n``: row ``k`` holds vehicle ``k``'s score for every client.  Under the
``preferences`` variant scores are in [0, 1]; under ``zone-constraints`` they
are 0/1 permissions.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PREFERENCES = "preferences"
ZONE_CONSTRAINTS = "zone-constraints"
VARIANTS = (PREFERENCES, ZONE_CONSTRAINTS)
DIST_KINDS = ("random", "angle", "cluster", "zone")

# Which profile distributions make sense for which variant.
_ALLOWED_DISTS = {
    PREFERENCES: ("random", "angle", "cluster"),
    ZONE_CONSTRAINTS: ("zone", "angle"),
}

_SQRT2 = math.sqrt(2.0)


class GenerationError(RuntimeError):
    pass


class InstanceFormatError(ValueError):
    pass


class InstanceValidationError(ValueError):
    pass


@dataclass(frozen=True)
class Instance:
    id: str
    n: int
    m: int
    depot: tuple[float, float]
    clients: tuple[tuple[float, float], ...]
    demands: tuple[float, ...]
    capacities: tuple[float, ...]
    speeds: tuple[float, ...]
    profiles: tuple[tuple[float, ...], ...]
    variant: str
    alpha: float
    dist_kind: str
    seed: int

    @property
    def is_zone(self) -> bool:
        return self.variant == ZONE_CONSTRAINTS

    def coords(self) -> np.ndarray:
        """Node coordinates, shape (n + 1, 2); row 0 is the depot."""
        return np.array((self.depot,) + self.clients, dtype=np.float64).reshape(self.n + 1, 2)

    def node_demands(self) -> np.ndarray:
        """Demands including the depot's zero, shape (n + 1,)."""
        return np.concatenate([[0.0], np.asarray(self.demands, dtype=np.float64)])

    def node_profiles(self) -> np.ndarray:
        """Profile matrix with a depot column prepended, shape (m, n + 1).

        The depot scores 0 under preferences (so a depot tail adds nothing to
        the objective) and 1 under zone constraints (always reachable).
        """
        p = np.asarray(self.profiles, dtype=np.float64).reshape(self.m, self.n)
        depot = 1.0 if self.is_zone else 0.0
        return np.concatenate([np.full((self.m, 1), depot), p], axis=1)

    def distance_matrix(self) -> np.ndarray:
        xy = self.coords()
        diff = xy[:, None, :] - xy[None, :, :]
        return np.sqrt((diff**2).sum(-1))

    def with_alpha(self, alpha: float) -> "Instance":
        return replace(self, alpha=float(alpha))

    def check(self) -> None:
        """Raise InstanceValidationError if any type invariant fails."""
        _check_instance(self)


@dataclass
class GenConfig:
    n: int
    m: int
    dist_kind: str = "random"
    variant: str = PREFERENCES
    alpha: float = 0.1
    demand_range: tuple[int, int] = (1, 9)
    capacity_range: tuple[float, float] = (20, 40)
    speed_range: tuple[float, float] = (0.5, 1.0)
    seed: int = 0
    id: str | None = None

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise ValueError(f"need n >= 1 and m >= 1, got n={self.n}, m={self.m}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.dist_kind not in DIST_KINDS:
            raise ValueError(f"unknown dist_kind {self.dist_kind!r}")
        if self.dist_kind not in _ALLOWED_DISTS[self.variant]:
            raise ValueError(
                f"dist_kind {self.dist_kind!r} is not valid for variant {self.variant!r} "
                f"(allowed: {', '.join(_ALLOWED_DISTS[self.variant])})"
            )
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        for name in ("demand_range", "capacity_range", "speed_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is empty: {lo} > {hi}")
        if self.demand_range[0] <= 0 or self.capacity_range[0] <= 0 or self.speed_range[0] <= 0:
            raise ValueError("demands, capacities and speeds must be positive")


def valid_dists(variant: str) -> tuple[str, ...]:
    return _ALLOWED_DISTS[variant]


def derive_seed(seed: int, index: int) -> int:
    """Independent 64-bit child seed for the index-th instance of a set."""
    ss = np.random.SeedSequence([seed & (2**64 - 1), index])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def generate(config: GenConfig) -> Instance:
    rng = np.random.default_rng(config.seed)
    n, m = config.n, config.m
    depot = rng.uniform(0.0, 1.0, size=2)
    clients = rng.uniform(0.0, 1.0, size=(n, 2))
    lo, hi = config.demand_range
    demands = rng.integers(lo, hi + 1, size=n).astype(np.float64)
    lo, hi = config.capacity_range
    capacities = rng.integers(int(lo), int(hi) + 1, size=m).astype(np.float64)
    speeds = rng.uniform(*config.speed_range, size=m)
    if demands.max() > capacities.max():
        raise GenerationError("a client demand exceeds every vehicle capacity")

    kind = config.dist_kind
    if kind == "random":
        profiles = rng.uniform(0.0, 1.0, size=(m, n))
    elif kind == "angle":
        profiles = profile_angle(depot, clients, m, rng)
    elif kind == "cluster":
        profiles = profile_cluster(clients, m, rng)
    else:
        profiles = profile_zone(clients, m, rng, demands=demands, capacities=capacities)

    inst_id = config.id or f"{kind}-n{n}-m{m}-{config.seed}"
    inst = Instance(
        id=inst_id,
        n=n,
        m=m,
        depot=(float(depot[0]), float(depot[1])),
        clients=tuple((float(x), float(y)) for x, y in clients),
        demands=tuple(float(d) for d in demands),
        capacities=tuple(float(q) for q in capacities),
        speeds=tuple(float(s) for s in speeds),
        profiles=tuple(tuple(float(v) for v in row) for row in profiles),
        variant=config.variant,
        alpha=float(config.alpha),
        dist_kind=kind,
        seed=int(config.seed),
    )
    _check_instance(inst)
    return inst


def generate_set(config: GenConfig, count: int, alpha_range: tuple[float, float] | None = None) -> list[Instance]:
    """``count`` instances with seeds derived from ``config.seed``.

    With ``alpha_range`` set, each instance draws its own alpha uniformly from
    that interval (using its own seed, so the set stays reproducible).
    """
    out = []
    for i in range(count):
        child = derive_seed(config.seed, i)
        alpha = config.alpha
        if alpha_range is not None:
            alpha = float(np.random.default_rng([child, 1]).uniform(*alpha_range))
        cfg = replace(config, seed=child, alpha=alpha, id=f"{config.dist_kind}-n{config.n}-m{config.m}-{config.seed}-{i:05d}")
        out.append(generate(cfg))
    return out


def angle_sectors(depot, clients, m: int, offset: float, perm: Sequence[int]) -> np.ndarray:
    """One-hot sector membership, shape (m, n).

    Sectors are half-open angular intervals [offset + s*w, offset + (s+1)*w)
    around the depot with w = 2*pi/m; vehicle k owns sector ``perm[k]``.
    """
    clients = np.asarray(clients, dtype=np.float64).reshape(-1, 2)
    depot = np.asarray(depot, dtype=np.float64)
    width = 2.0 * math.pi / m
    theta = np.arctan2(clients[:, 1] - depot[1], clients[:, 0] - depot[0])
    rel = np.mod(theta - offset, 2.0 * math.pi)
    sector = np.minimum(np.floor(rel / width).astype(int), m - 1)
    perm = np.asarray(perm)
    return (sector[None, :] == perm[:, None]).astype(np.float64)


def profile_angle(depot, clients, m: int, rng: np.random.Generator) -> np.ndarray:
    offset = rng.uniform(0.0, 2.0 * math.pi)
    perm = rng.permutation(m)
    return angle_sectors(depot, clients, m, offset, perm)


def cluster_scores(clients, centers) -> np.ndarray:
    """Preference 1 - dist/sqrt(2), clipped at 0; shape (len(centers), n)."""
    clients = np.asarray(clients, dtype=np.float64).reshape(-1, 2)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    dist = np.sqrt(((centers[:, None, :] - clients[None, :, :]) ** 2).sum(-1))
    return np.maximum(0.0, 1.0 - dist / _SQRT2)


def profile_cluster(clients, m: int, rng: np.random.Generator) -> np.ndarray:
    centers = rng.uniform(0.0, 1.0, size=(m, 2))
    return cluster_scores(clients, centers)


def profile_zone(
    clients,
    m: int,
    rng: np.random.Generator,
    demands=None,
    capacities=None,
) -> np.ndarray:
    """Binary zone permissions, shape (m, n).

    Zones are Voronoi cells of m..3m random centers; each (vehicle, zone)
    pair is available with probability 1/2.  Clients left without a capable
    vehicle are repaired by opening their zone to a random capable vehicle.
    """
    clients = np.asarray(clients, dtype=np.float64).reshape(-1, 2)
    n = len(clients)
    if demands is None:
        demands = np.zeros(n)
    if capacities is None:
        capacities = np.ones(m)
    demands = np.asarray(demands, dtype=np.float64)
    capacities = np.asarray(capacities, dtype=np.float64)

    n_zones = int(rng.integers(m, 3 * m + 1))
    centers = rng.uniform(0.0, 1.0, size=(n_zones, 2))
    dist = ((clients[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    zone = dist.argmin(axis=1)
    avail = rng.random((m, n_zones)) < 0.5

    capable = capacities[:, None] >= demands[None, :]  # (m, n)
    for _ in range(n_zones * m + 1):
        ok = (avail[:, zone] & capable).any(axis=0)
        if ok.all():
            break
        i = int(np.flatnonzero(~ok)[0])
        choices = np.flatnonzero(capable[:, i])
        if len(choices) == 0:
            raise GenerationError(f"client {i + 1} cannot be served by any vehicle")
        avail[int(rng.choice(choices)), zone[i]] = True
    else:
        raise GenerationError("zone repair budget exhausted")
    return avail[:, zone].astype(np.float64)


def _check_instance(inst: Instance) -> None:
    def fail(msg):
        raise InstanceValidationError(f"instance {inst.id!r}: {msg}")

    if inst.variant not in VARIANTS:
        fail(f"unknown variant {inst.variant!r}")
    if inst.dist_kind not in DIST_KINDS:
        fail(f"unknown dist_kind {inst.dist_kind!r}")
    if inst.n < 0 or inst.m < 1:
        fail("need n >= 0 and m >= 1")
    if len(inst.clients) != inst.n or len(inst.demands) != inst.n:
        fail("clients/demands length does not match n")
    if len(inst.capacities) != inst.m or len(inst.speeds) != inst.m:
        fail("capacities/speeds length does not match m")
    if len(inst.profiles) != inst.m or any(len(row) != inst.n for row in inst.profiles):
        fail("profile matrix is not m x n")
    for x, y in (inst.depot,) + inst.clients:
        if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
            fail(f"coordinate ({x}, {y}) outside the unit square")
    if any(not (q > 0) for q in inst.capacities):
        fail("capacities must be positive")
    if any(not (s > 0) for s in inst.speeds):
        fail("speeds must be positive")
    if any(not (d > 0) for d in inst.demands):
        fail("demands must be positive")
    if not (inst.alpha >= 0):
        fail("alpha must be nonnegative")
    if inst.n and max(inst.demands) > max(inst.capacities):
        fail("a demand exceeds every capacity")
    p = inst.profiles
    if inst.variant == PREFERENCES:
        if any(not (0.0 <= v <= 1.0) for row in p for v in row):
            fail("preference scores must lie in [0, 1]")
    else:
        if any(v not in (0.0, 1.0) for row in p for v in row):
            fail("zone permissions must be 0 or 1")
        for i in range(inst.n):
            if not any(p[k][i] == 1.0 and inst.capacities[k] >= inst.demands[i] for k in range(inst.m)):
                fail(f"client {i + 1} has no permitted vehicle with enough capacity")


# --- JSONL serialization -------------------------------------------------

def _r(x: float) -> str:
    return format(float(x), ".17g")


def to_record(inst: Instance) -> dict:
    return {
        "id": inst.id,
        "n": inst.n,
        "m": inst.m,
        "depot": [_r(v) for v in inst.depot],
        "clients": [[_r(x), _r(y)] for x, y in inst.clients],
        "demands": [_r(d) for d in inst.demands],
        "capacities": [_r(q) for q in inst.capacities],
        "speeds": [_r(s) for s in inst.speeds],
        "profiles": [[_r(v) for v in row] for row in inst.profiles],
        "variant": inst.variant,
        "alpha": _r(inst.alpha),
        "dist_kind": inst.dist_kind,
        "seed": int(inst.seed),
    }


def from_record(rec: dict) -> Instance:
    f = float
    inst = Instance(
        id=str(rec["id"]),
        n=int(rec["n"]),
        m=int(rec["m"]),
        depot=tuple(f(v) for v in rec["depot"]),
        clients=tuple((f(x), f(y)) for x, y in rec["clients"]),
        demands=tuple(f(d) for d in rec["demands"]),
        capacities=tuple(f(q) for q in rec["capacities"]),
        speeds=tuple(f(s) for s in rec["speeds"]),
        profiles=tuple(tuple(f(v) for v in row) for row in rec["profiles"]),
        variant=str(rec["variant"]),
        alpha=f(rec["alpha"]),
        dist_kind=str(rec["dist_kind"]),
        seed=int(rec["seed"]),
    )
    if len(inst.depot) != 2:
        raise ValueError("depot must have two coordinates")
    return inst


def dumps(inst: Instance) -> str:
    return json.dumps(to_record(inst), separators=(",", ":"))


def write_instances(path, instances: Iterable[Instance]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(dumps(inst) + "\n")


def read_instances(path) -> list[Instance]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                inst = from_record(json.loads(line))
            except (ValueError, KeyError, TypeError) as exc:
                raise InstanceFormatError(f"{Path(path).name}:{lineno}: malformed record ({exc})") from exc
            try:
                _check_instance(inst)
            except InstanceValidationError as exc:
                raise InstanceValidationError(f"{Path(path).name}:{lineno}: {exc}") from exc
            out.append(inst)
    return out
