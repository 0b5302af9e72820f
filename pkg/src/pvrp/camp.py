"""CAMP policy: profile-aware encoder and parallel multi-pointer decoder.

Every vehicle k gets its own embedding of the graph ("profile k"): node j's
row mixes the vehicle features, the client features and the profile score
p_kj.  The encoder runs transformer blocks on each profile separately and
(optionally) lets vehicles and clients exchange messages over the bipartite
vehicle-client graph.  The decoder builds one query per vehicle, lets the
queries talk to each other, attends over the vehicle's own profile and
scores every node with a tanh-bounded pointer.

Shape legend: B episodes, m vehicles, n clients (+1 depot), d = d_h.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import env as envlib
from . import ndcore as nd
from .instance import Instance
from .ndcore import Parameter, Tensor
from .validator import Solution

VEHICLE_FEATURES = 4  # depot x, depot y, Q_k / Q_max, speed
CLIENT_FEATURES = 3  # x, y, demand / Q_max
CONTEXT_FEATURES = 3  # o_k / Q_k, T_k / T_norm, unserved demand fraction


@dataclass
class CampConfig:
    d_h: int = 32
    heads: int = 4
    ffn_width: int = 64
    layers: int = 2
    C: float = 10.0
    encoder_comm: bool = True
    profile_embeddings: bool = True
    dtype: str = "float64"

    def __post_init__(self):
        if self.d_h % self.heads:
            raise ValueError(f"d_h={self.d_h} is not divisible by heads={self.heads}")
        if self.C <= 0:
            raise ValueError("C must be positive")
        if self.layers < 1:
            raise ValueError("need at least one encoder layer")

    @classmethod
    def full_scale(cls, **overrides) -> "CampConfig":
        return cls(**{"d_h": 128, "heads": 8, "ffn_width": 512, "layers": 3, **overrides})

    def to_dict(self) -> dict:
        return asdict(self)


class CampParams(dict):
    """Ordered name -> Parameter mapping."""

    def count(self) -> int:
        return int(np.sum([p.data.size for p in self.values()]))

    def zero_grad(self) -> None:
        for p in self.values():
            p.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.items()}

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self) ^ set(arrays)
        if missing:
            raise ValueError(f"checkpoint/config mismatch: parameters {sorted(missing)}")
        for name, p in self.items():
            a = arrays[name]
            if a.shape != p.shape:
                raise ValueError(f"checkpoint/config mismatch for {name}: {a.shape} vs {p.shape}")
            p.data[...] = a


def _mha_shapes(prefix: str, d: int) -> dict:
    return {f"{prefix}.{w}": (d, d) for w in ("Wq", "Wk", "Wv", "Wo")}


def _block_shapes(prefix: str, d: int, f: int) -> dict:
    shapes = _mha_shapes(f"{prefix}.mha", d)
    shapes.update(
        {
            f"{prefix}.ln1.g": (d,),
            f"{prefix}.ln1.b": (d,),
            f"{prefix}.ffn.W1": (d, f),
            f"{prefix}.ffn.b1": (f,),
            f"{prefix}.ffn.W2": (f, d),
            f"{prefix}.ffn.b2": (d,),
            f"{prefix}.ln2.g": (d,),
            f"{prefix}.ln2.b": (d,),
        }
    )
    return shapes


def param_shapes(config: CampConfig) -> dict[str, tuple[int, ...]]:
    d, f = config.d_h, config.ffn_width
    shapes = {
        "init_v.W": (VEHICLE_FEATURES, d),
        "init_v.b": (d,),
        "init_c.W": (CLIENT_FEATURES, d),
        "init_c.b": (d,),
        "init_p.W": (1, d),
        "init_p.b": (d,),
        "combine.W": (3 * d, d),
        "combine.b": (d,),
    }
    for layer in range(config.layers):
        shapes.update(_block_shapes(f"enc{layer}", d, f))
        if config.encoder_comm:
            for phi in ("phi_vc", "phi_cv"):
                shapes.update(
                    {
                        f"enc{layer}.{phi}.W1": (3 * d, d),
                        f"enc{layer}.{phi}.b1": (d,),
                        f"enc{layer}.{phi}.W2": (d, d),
                        f"enc{layer}.{phi}.b2": (d,),
                    }
                )
            shapes[f"enc{layer}.edge.W"] = (2 * d, d)
            shapes[f"enc{layer}.edge.b"] = (d,)
    shapes.update(
        {
            "dec.context.W": (CONTEXT_FEATURES, d),
            "dec.context.b": (d,),
            "dec.proj.W": (3 * d, d),
            "dec.proj.b": (d,),
        }
    )
    shapes.update(_block_shapes("dec.comm", d, f))
    shapes.update(_mha_shapes("dec.cross", d))
    shapes["dec.pointer.W"] = (d, d)
    return shapes


def init_params(config: CampConfig, seed: int = 0) -> CampParams:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); norm gains 1, biases 0."""
    rng = np.random.default_rng(seed)
    dtype = np.dtype(config.dtype)
    shapes = param_shapes(config)
    params = CampParams()
    for name, shape in shapes.items():
        prefix, leaf = name.rsplit(".", 1)
        if prefix.rsplit(".", 1)[-1].startswith("ln"):
            value = np.ones(shape) if leaf == "g" else np.zeros(shape)
        else:
            # a bias shares the bound of the weight it belongs to
            fan = shape[0] if len(shape) == 2 else shapes[f"{prefix}.{leaf.replace('b', 'W')}"][0]
            bound = 1.0 / math.sqrt(fan)
            value = rng.uniform(-bound, bound, size=shape)
        params[name] = Parameter(value.astype(dtype), name=name, dtype=dtype)
    return params


# --- encoder -------------------------------------------------------------------

@dataclass
class ProfileEmbeddings:
    """Encoder output for a batch.

    ``nodes``: (B, m, n+1, d) profile-k embedding of depot + clients (the
    vehicle-client edge embeddings).  ``vehicles``: (B, m, m, d) vehicle rows
    of each profile; ``self_rows`` (B, m, d) is vehicle k's row in profile k.
    ``keys``/``values`` are the cross-attention projections split into heads
    and ``pointer`` the pointer projection of ``nodes``; they are computed
    once per rollout.
    """

    nodes: Tensor
    vehicles: Tensor
    self_rows: Tensor
    keys: Tensor
    values: Tensor
    pointer: Tensor


def _features(batch: envlib.InstanceBatch, dtype):
    qmax = batch.capacity.max(axis=1, keepdims=True)  # (B, 1)
    B, m = batch.capacity.shape
    depot = np.broadcast_to(batch.coords[:, None, 0, :], (B, m, 2))
    xv = np.concatenate([depot, (batch.capacity / qmax)[..., None], batch.speed[..., None]], axis=-1)
    xc = np.concatenate([batch.coords, (batch.demand / qmax)[..., None]], axis=-1)
    xp = batch.profile[..., None]
    return xv.astype(dtype), xc.astype(dtype), xp.astype(dtype)


def _block(x: Tensor, params: CampParams, prefix: str, heads: int) -> Tensor:
    p = params
    a = nd.mha(x, x, x, p[f"{prefix}.mha.Wq"], p[f"{prefix}.mha.Wk"], p[f"{prefix}.mha.Wv"], p[f"{prefix}.mha.Wo"], heads)
    x = nd.layer_norm(x + a, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    h = nd.ffn(x, p[f"{prefix}.ffn.W1"], p[f"{prefix}.ffn.W2"], p[f"{prefix}.ffn.b1"], p[f"{prefix}.ffn.b2"])
    return nd.layer_norm(x + h, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])


def _phi(params: CampParams, prefix: str, sender: Tensor, receiver: Tensor, edge: Tensor) -> Tensor:
    x = nd.concat([sender, receiver, edge], axis=-1)
    return nd.ffn(x, params[f"{prefix}.W1"], params[f"{prefix}.W2"], params[f"{prefix}.b1"], params[f"{prefix}.b2"])


def _as_batch(instance) -> envlib.InstanceBatch:
    if isinstance(instance, envlib.InstanceBatch):
        return instance
    if isinstance(instance, Instance):
        return envlib.InstanceBatch.from_instances([instance])
    return envlib.InstanceBatch.from_instances(instance)


def encode(instance, params: CampParams, config: CampConfig) -> ProfileEmbeddings:
    batch = _as_batch(instance)
    p = params
    B, m, n1 = batch.size, batch.m, batch.n + 1
    d = config.d_h
    xv, xc, xp = _features(batch, np.dtype(config.dtype))

    hv = nd.linear(xv, p["init_v.W"], p["init_v.b"])  # (B, m, d)
    hc = nd.linear(xc, p["init_c.W"], p["init_c.b"])  # (B, n1, d)
    hp = nd.linear(xp, p["init_p.W"], p["init_p.b"])  # (B, m, n1, d)

    if config.profile_embeddings:
        edge_in = nd.concat(
            [
                nd.broadcast_to(nd.reshape(hv, (B, m, 1, d)), (B, m, n1, d)),
                nd.broadcast_to(nd.reshape(hc, (B, 1, n1, d)), (B, m, n1, d)),
                hp,
            ],
            axis=-1,
        )
        P = m
    else:
        # one embedding set shared by every vehicle: average out the vehicle axis
        edge_in = nd.concat(
            [
                nd.broadcast_to(nd.mean(hv, axis=1, keepdims=True), (B, n1, d)),
                hc,
                nd.mean(hp, axis=1),
            ],
            axis=-1,
        )
        edge_in = nd.reshape(edge_in, (B, 1, n1, 3 * d))
        P = 1
    edges = nd.linear(edge_in, p["combine.W"], p["combine.b"])  # (B, P, n1, d)
    vrows = nd.broadcast_to(nd.reshape(hv, (B, 1, m, d)), (B, P, m, d))
    H = nd.concat([edges, vrows], axis=2)  # (B, P, n1 + m, d)
    clients = hc

    ks = np.arange(m)
    for layer in range(config.layers):
        H = _block(H, p, f"enc{layer}", config.heads)
        if not config.encoder_comm:
            continue
        pre = f"enc{layer}"
        E = nd.index(H, (slice(None), slice(None), slice(0, n1)))  # (B, P, n1, d)
        V = nd.index(H, (slice(None), slice(None), slice(n1, None)))  # (B, P, m, d)
        if P == m:
            v = nd.index(H, (slice(None), ks, n1 + ks))  # (B, m, d)
        else:
            v = nd.reshape(V, (B, m, d))
        Eb = nd.broadcast_to(E, (B, m, n1, d))
        vb = nd.broadcast_to(nd.reshape(v, (B, m, 1, d)), (B, m, n1, d))
        cb = nd.broadcast_to(nd.reshape(clients, (B, 1, n1, d)), (B, m, n1, d))
        # vehicle -> client, averaged over vehicles
        c_new = clients + nd.mean(_phi(p, f"{pre}.phi_vc", vb, cb, Eb), axis=1)
        cb = nd.broadcast_to(nd.reshape(c_new, (B, 1, n1, d)), (B, m, n1, d))
        # client -> vehicle, averaged over depot + clients
        v_msg = nd.mean(_phi(p, f"{pre}.phi_cv", cb, vb, Eb), axis=2)  # (B, m, d)
        v_new = v + v_msg
        vb = nd.broadcast_to(nd.reshape(v_new, (B, m, 1, d)), (B, m, n1, d))
        E_new = nd.linear(nd.concat([vb, cb], axis=-1), p[f"{pre}.edge.W"], p[f"{pre}.edge.b"]) + Eb
        if P == 1:
            E_new = nd.mean(E_new, axis=1, keepdims=True)
        V_new = V + nd.reshape(v_msg, (B, 1, m, d))
        H = nd.concat([E_new, V_new], axis=2)
        clients = c_new

    if P == 1:
        H = nd.broadcast_to(H, (B, m, n1 + m, d))
    nodes = nd.index(H, (slice(None), slice(None), slice(0, n1)))
    vehicles = nd.index(H, (slice(None), slice(None), slice(n1, None)))
    self_rows = nd.index(H, (slice(None), ks, n1 + ks))
    keys = nd.split_heads(nd.matmul(nodes, p["dec.cross.Wk"]), config.heads)  # (B, m, h, n1, dk)
    values = nd.split_heads(nd.matmul(nodes, p["dec.cross.Wv"]), config.heads)
    pointer = nd.matmul(nodes, p["dec.pointer.W"])  # (B, m, n1, d)
    return ProfileEmbeddings(nodes, vehicles, self_rows, keys, values, pointer)


# --- decoder -------------------------------------------------------------------

@dataclass
class DecodeOutput:
    logits: Tensor  # (B, m, n+1), |Z| <= C
    log_probs: Tensor  # (B, m, n+1), masked entries meaningless
    probs: np.ndarray  # (B, m, n+1), masked entries exactly 0
    mask: np.ndarray  # (B, m, n+1) final feasibility mask


def context_features(batch: envlib.InstanceBatch, state: envlib.State) -> np.ndarray:
    t_norm = max(batch.n, 1) * math.sqrt(2.0)
    total = batch.demand[:, 1:].sum(axis=1, keepdims=True)
    left = state.demand[:, 1:].sum(axis=1, keepdims=True)
    frac = np.where(total > 0, left / np.where(total > 0, total, 1.0), 0.0)
    B, m = state.remaining.shape
    return np.stack(
        [state.remaining / batch.capacity, state.elapsed / t_norm, np.broadcast_to(frac, (B, m))], axis=-1
    )


def decode_step(
    h: ProfileEmbeddings,
    batch: envlib.InstanceBatch,
    state: envlib.State,
    params: CampParams,
    config: CampConfig,
) -> DecodeOutput:
    p = params
    B, m = state.current.shape
    n1 = batch.n + 1
    d = config.d_h
    dtype = np.dtype(config.dtype)

    rows, ks = np.arange(B)[:, None], np.arange(m)[None, :]
    cur = nd.index(h.nodes, (rows, ks, state.current))  # (B, m, d)
    ctx = nd.linear(context_features(batch, state).astype(dtype), p["dec.context.W"], p["dec.context.b"])
    q = nd.linear(nd.concat([h.self_rows, cur, ctx], axis=-1), p["dec.proj.W"], p["dec.proj.b"])
    q = _block(q, p, "dec.comm", config.heads)  # vehicles attend to each other

    open_mask = envlib.open_mask(batch, state)
    qh = nd.split_heads(nd.reshape(nd.matmul(q, p["dec.cross.Wq"]), (B, m, 1, d)), config.heads)
    glimpse = nd.attention(qh, h.keys, h.values, open_mask[:, :, None, None, :])
    u = nd.matmul(nd.merge_heads(glimpse), p["dec.cross.Wo"])  # (B, m, 1, d)
    scores = nd.matmul(u, nd.swapaxes(h.pointer, -1, -2))  # (B, m, 1, n1)
    z = nd.mul(nd.tanh(nd.mul(nd.reshape(scores, (B, m, n1)), 1.0 / math.sqrt(d))), config.C)

    # which vehicle must leave when everybody is parked: the one most eager for clients
    with nd.no_grad():
        open_probs = nd.softmax_rows(z.data, open_mask).data
    mask = envlib.apply_progress_rule(open_mask, state, 1.0 - open_probs[..., 0])
    logp = nd.log_softmax_rows(z, mask)
    probs = np.where(mask, np.exp(logp.data), 0.0)
    return DecodeOutput(logits=z, log_probs=logp, probs=probs, mask=mask)


# --- rollouts ------------------------------------------------------------------

@dataclass
class RolloutResult:
    solutions: list[Solution]
    log_prob: Tensor  # (B,) summed over steps and vehicles
    reward: np.ndarray  # (B,)
    actions: list[np.ndarray]  # selected (pre-conflict) actions per step
    steps: int


def select(probs: np.ndarray, mode: str, rng: np.random.Generator | None) -> np.ndarray:
    if mode == "greedy":
        return probs.argmax(axis=-1)
    if mode != "sample":
        raise ValueError(f"unknown decode mode {mode!r}")
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1] + (1,)) * cdf[..., -1:]
    idx = (cdf <= u).sum(axis=-1)
    # never land on a masked entry through round-off
    idx = np.minimum(idx, probs.shape[-1] - 1)
    bad = np.take_along_axis(probs, idx[..., None], -1)[..., 0] <= 0
    if bad.any():
        idx = np.where(bad, probs.argmax(-1), idx)
    return idx


def rollout(
    instance,
    params: CampParams,
    config: CampConfig,
    mode: str = "greedy",
    rng: np.random.Generator | None = None,
    actions: list[np.ndarray] | None = None,
) -> RolloutResult:
    """Decode complete solutions for a batch of same-shape instances.

    With ``actions`` the given per-step selections are replayed instead of
    sampled, which makes the log-probability a deterministic function of the
    parameters (used for gradient checks).
    """
    batch = _as_batch(instance)
    h = encode(batch, params, config)
    state = envlib.reset(batch)
    total: Tensor = nd.tensor(np.zeros(batch.size, dtype=np.dtype(config.dtype)))
    chosen: list[np.ndarray] = []
    t = 0
    while not state.done.all():
        out = decode_step(h, batch, state, params, config)
        sel = actions[t] if actions is not None else select(out.probs, mode, rng)
        picked = np.take_along_axis(out.probs, sel[..., None], -1)[..., 0]
        if not (picked > 0).all():
            raise envlib.ContractError("selected an infeasible action")
        lp = nd.take_along(out.log_probs, sel[..., None], axis=2)  # (B, m, 1)
        total = total + nd.sum(lp, axis=(1, 2))
        joint = envlib.resolve_conflicts(sel, picked, state.current)
        state = envlib.step(batch, state, joint, check=False)
        chosen.append(sel)
        t += 1
    reward = envlib.terminal_reward(batch, state)
    solutions = [envlib.solution_from(state, b) for b in range(batch.size)]
    return RolloutResult(solutions=solutions, log_prob=total, reward=reward, actions=chosen, steps=t)


def solve(
    instances,
    params: CampParams,
    config: CampConfig,
    mode: str = "greedy",
    samples: int = 1,
    rng: np.random.Generator | None = None,
) -> list[tuple[Solution, float]]:
    """Best-of-``samples`` solution and reward for every instance, in input order.

    Instances are batched by (n, m); greedy decoding ignores ``samples``.
    """
    instances = list(instances)
    if mode == "greedy":
        samples = 1
    elif rng is None:
        raise ValueError("sampling needs an rng")
    groups: dict[tuple[int, int], list[int]] = {}
    for i, inst in enumerate(instances):
        groups.setdefault((inst.n, inst.m), []).append(i)
    out: list[tuple[Solution, float] | None] = [None] * len(instances)
    with nd.no_grad():
        for key in sorted(groups):
            idx = groups[key]
            batch = [instances[i] for i in idx]
            for _ in range(samples):
                res = rollout(batch, params, config, mode=mode, rng=rng)
                for j, i in enumerate(idx):
                    r = float(res.reward[j])
                    if out[i] is None or r > out[i][1]:
                        out[i] = (res.solutions[j], r)
    return out
