"""REINFORCE training with a symmetric shared baseline and reward balancing.

A batch holds ``B`` rollouts: ``B / L`` freshly generated instances, each
seen under ``L`` dihedral transforms of the unit square.  The baseline of a
rollout is the mean reward of its augmentation group.  With reward balancing
on, rewards of each profile distribution are first divided by an
exponentially smoothed running mean for that distribution so that every
distribution contributes gradients of similar size.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import camp
from . import ndcore as nd
from .instance import PREFERENCES, GenConfig, Instance, derive_seed, generate, valid_dists

METRIC_FIELDS = ["epoch", "batch", "dist_kind", "n", "mean_reward", "normalized_mean", "loss", "grad_norm", "lr"]
TIMING_FIELDS = ["epoch", "batch", "wallclock_ms"]


class TrainingDiverged(RuntimeError):
    """Raised when the loss or a gradient stops being finite."""


@dataclass
class TrainConfig:
    epochs: int = 10
    samples_per_epoch: int = 19200
    batch_size: int = 64
    augmentations: int = 4
    lr0: float = 1e-4
    decay_points: tuple[float, ...] = (0.8, 0.95)
    decay_factor: float = 0.1
    beta: float = 0.1
    variant: str = PREFERENCES
    dist_kinds: tuple[str, ...] | None = None  # None -> every kind valid for the variant
    n_range: tuple[int, int] = (5, 10)
    m: int = 2
    alpha_range: tuple[float, float] | None = (0.0, 0.2)
    alpha: float = 0.1  # used when alpha_range is None
    reward_balance: bool = True
    max_grad_norm: float | None = None
    seed: int = 0
    model: camp.CampConfig = field(default_factory=camp.CampConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = camp.CampConfig(**self.model)
        self.decay_points = tuple(self.decay_points)
        self.n_range = tuple(self.n_range)
        if self.alpha_range is not None:
            self.alpha_range = tuple(self.alpha_range)
        if self.dist_kinds is None:
            self.dist_kinds = valid_dists(self.variant)
        self.dist_kinds = tuple(self.dist_kinds)
        bad = [k for k in self.dist_kinds if k not in valid_dists(self.variant)]
        if bad:
            raise ValueError(f"distributions {bad} are not valid for variant {self.variant!r}")
        if self.batch_size % self.augmentations:
            raise ValueError(f"batch_size={self.batch_size} is not a multiple of augmentations={self.augmentations}")
        if not 1 <= self.augmentations <= 8:
            raise ValueError("augmentations must be in 1..8")
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie strictly between 0 and 1")
        if self.epochs < 1 or self.samples_per_epoch < self.batch_size:
            raise ValueError("need at least one epoch of at least one batch")
        if self.n_range[0] < 1 or self.n_range[0] > self.n_range[1]:
            raise ValueError(f"bad n_range {self.n_range}")

    @property
    def batches_per_epoch(self) -> int:
        return self.samples_per_epoch // self.batch_size

    @property
    def groups(self) -> int:
        return self.batch_size // self.augmentations

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# --- symmetric augmentation ------------------------------------------------------

def _dihedral(xy: np.ndarray, g: int) -> np.ndarray:
    """Element g of the symmetry group of the unit square (rotations, then a flip)."""
    x, y = xy[..., 0], xy[..., 1]
    for _ in range(g % 4):
        x, y = 1.0 - y, x  # quarter turn about the centre
    if g >= 4:
        x = 1.0 - x
    return np.stack([x, y], axis=-1)


def symmetric_augment(instance: Instance, g: int) -> Instance:
    if not 0 <= g < 8:
        raise ValueError(f"augmentation index must be in 0..7, got {g}")
    if g == 0:
        return instance
    depot = _dihedral(np.asarray(instance.depot, dtype=np.float64), g)
    clients = _dihedral(np.asarray(instance.clients, dtype=np.float64).reshape(-1, 2), g)
    return replace(
        instance,
        id=f"{instance.id}@g{g}",
        depot=(float(depot[0]), float(depot[1])),
        clients=tuple((float(a), float(b)) for a, b in clients),
    )


# --- baseline, balancing, loss -----------------------------------------------------

def shared_baseline(rewards: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Group-mean baseline. ``rewards`` is (groups, L); returns (baseline (groups,), advantages)."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.ndim == 1:
        rewards = rewards[None]
    if rewards.shape[1] < 2:
        raise ValueError("a shared baseline needs at least two rollouts per group")
    baseline = rewards.mean(axis=1)
    return baseline, rewards - baseline[:, None]


@dataclass
class Smoothed:
    value: float = 0.0
    initialized: bool = False
    t: int = 0


@dataclass
class SmoothingState:
    beta: float = 0.1
    entries: dict[str, Smoothed] = field(default_factory=dict)

    def update(self, kind: str, batch_mean: float) -> float:
        e = self.entries.setdefault(kind, Smoothed())
        if not e.initialized:
            e.value, e.initialized = float(batch_mean), True
        else:
            e.value = (1.0 - self.beta) * e.value + self.beta * float(batch_mean)
        e.t += 1
        return e.value

    def to_dict(self) -> dict:
        return {"beta": self.beta, "entries": {k: asdict(v) for k, v in self.entries.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "SmoothingState":
        return cls(beta=d["beta"], entries={k: Smoothed(**v) for k, v in d["entries"].items()})


def reward_normalize(state: SmoothingState, kind: str, batch_mean: float, rewards) -> np.ndarray:
    """Update the running mean of ``kind`` and scale rewards by its magnitude."""
    scale = abs(state.update(kind, batch_mean))
    rewards = np.asarray(rewards, dtype=np.float64)
    if scale < 1e-8:
        return rewards.copy()
    return rewards / scale


def reinforce_loss(log_probs: nd.Tensor, advantages) -> nd.Tensor:
    adv = np.asarray(advantages, dtype=log_probs.data.dtype)
    if adv.size != log_probs.data.size:
        raise ValueError(f"{log_probs.data.size} log-probs but {adv.size} advantages")
    adv = adv.reshape(log_probs.shape)
    return nd.neg(nd.mean(nd.mul(log_probs, nd.tensor(adv))))


def lr_at(epoch: int, config: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    passed = sum(1 for f in config.decay_points if epoch >= f * config.epochs)
    return config.lr0 * config.decay_factor**passed


# --- batches -------------------------------------------------------------------------

@dataclass
class BatchPlan:
    index: int
    dist_kind: str
    n: int
    instances: list[Instance]  # B entries, groups of L consecutive augments


def plan_batch(config: TrainConfig, index: int) -> BatchPlan:
    """Instances of global batch ``index``; a pure function of (config, index)."""
    rng = np.random.default_rng([config.seed, 7, index])
    kind = config.dist_kinds[index % len(config.dist_kinds)]
    n = int(rng.integers(config.n_range[0], config.n_range[1] + 1))
    out = []
    for i in range(config.groups):
        alpha = config.alpha if config.alpha_range is None else float(rng.uniform(*config.alpha_range))
        gen = GenConfig(
            n=n,
            m=config.m,
            dist_kind=kind,
            variant=config.variant,
            alpha=alpha,
            seed=derive_seed(config.seed, index * config.groups + i),
            id=f"train-{index}-{i}",
        )
        inst = generate(gen)
        gs = [0] + sorted(rng.choice(np.arange(1, 8), size=config.augmentations - 1, replace=False).tolist())
        out.extend(symmetric_augment(inst, g) for g in gs)
    return BatchPlan(index=index, dist_kind=kind, n=n, instances=out)


def _grad_norm(params: camp.CampParams) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return math.sqrt(total)


@dataclass
class Trainer:
    """Mutable training state: parameters, optimiser, smoothing, rng."""

    config: TrainConfig
    params: camp.CampParams
    adam: nd.AdamState
    smoothing: SmoothingState
    rng: np.random.Generator
    batches_done: int = 0

    @classmethod
    def create(cls, config: TrainConfig, params: camp.CampParams | None = None) -> "Trainer":
        if params is None:
            params = camp.init_params(config.model, seed=config.seed)
        return cls(
            config=config,
            params=params,
            adam=nd.AdamState(),
            smoothing=SmoothingState(beta=config.beta),
            rng=np.random.default_rng([config.seed, 11]),
        )

    def train_batch(self, epoch: int, dump_dir: Path | None = None) -> dict:
        cfg = self.config
        plan = plan_batch(cfg, self.batches_done)
        bad = self._bad_params()
        if bad:
            self._dump(dump_dir, epoch, plan, math.nan, math.nan, [])
            raise TrainingDiverged(f"non-finite parameters before epoch {epoch}, batch {plan.index}: {bad}")
        result = camp.rollout(plan.instances, self.params, cfg.model, mode="sample", rng=self.rng)
        rewards = result.reward
        mean_reward = float(rewards.mean())
        if cfg.reward_balance:
            scaled = reward_normalize(self.smoothing, plan.dist_kind, mean_reward, rewards)
        else:
            scaled = rewards
        _, adv = shared_baseline(scaled.reshape(cfg.groups, cfg.augmentations))
        self.params.zero_grad()
        loss = reinforce_loss(result.log_prob, adv.reshape(-1))
        loss.backward()
        gnorm = _grad_norm(self.params)
        if not (math.isfinite(float(loss.data)) and math.isfinite(gnorm)):
            self._dump(dump_dir, epoch, plan, float(loss.data), gnorm, rewards)
            raise TrainingDiverged(
                f"non-finite loss/gradient at epoch {epoch}, batch {plan.index}: loss={float(loss.data)}, grad_norm={gnorm}"
            )
        if cfg.max_grad_norm is not None and gnorm > cfg.max_grad_norm:
            for p in self.params.values():
                if p.grad is not None:
                    p.grad = p.grad * (cfg.max_grad_norm / gnorm)
        lr = lr_at(epoch, cfg)
        nd.adam_step(self.params.values(), self.adam, lr)
        self.batches_done += 1
        return {
            "epoch": epoch,
            "batch": plan.index,
            "dist_kind": plan.dist_kind,
            "n": plan.n,
            "mean_reward": mean_reward,
            "normalized_mean": float(np.mean(scaled)),
            "loss": float(loss.data),
            "grad_norm": gnorm,
            "lr": lr,
        }

    def _bad_params(self) -> list[str]:
        """Names of parameters whose values or gradients are not finite."""
        return sorted(
            name
            for name, p in self.params.items()
            if not np.isfinite(p.data).all() or (p.grad is not None and not np.isfinite(p.grad).all())
        )

    def _dump(self, dump_dir, epoch, plan, loss, gnorm, rewards) -> None:
        if dump_dir is None:
            return
        record = {
            "epoch": epoch,
            "batch": plan.index,
            "dist_kind": plan.dist_kind,
            "loss": repr(loss),
            "grad_norm": repr(gnorm),
            "rewards": [repr(float(r)) for r in rewards],
            "instances": [i.id for i in plan.instances],
            "smoothing": self.smoothing.to_dict(),
            "bad_params": self._bad_params(),
        }
        Path(dump_dir).mkdir(parents=True, exist_ok=True)
        with open(Path(dump_dir) / "diverged.json", "w", encoding="utf-8") as fh:
            json.dump(record, fh, indent=1)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def train_epoch(trainer: Trainer, epoch: int, out_dir=None, metrics_writer=None, timing_writer=None) -> list[dict]:
    """Run one epoch of batches; returns the metric rows."""
    rows = []
    for _ in range(trainer.config.batches_per_epoch):
        t0 = time.perf_counter()
        row = trainer.train_batch(epoch, dump_dir=out_dir)
        rows.append(row)
        if metrics_writer is not None:
            metrics_writer.writerow([_fmt(row[k]) for k in METRIC_FIELDS])
        if timing_writer is not None:
            ms = (time.perf_counter() - t0) * 1000.0
            timing_writer.writerow([epoch, row["batch"], f"{ms:.1f}"])
    return rows


def checkpoint_meta(trainer: Trainer, epoch: int) -> dict:
    cfg = trainer.config
    return {
        "model": cfg.model.to_dict(),
        "train": cfg.to_dict(),
        "epoch": epoch,
        "batches_done": trainer.batches_done,
        "smoothing": trainer.smoothing.to_dict(),
        "ablation": {
            "encoder_comm": cfg.model.encoder_comm,
            "profile_embeddings": cfg.model.profile_embeddings,
            "reward_balance": cfg.reward_balance,
        },
    }


def train(config: TrainConfig, out_dir, params: camp.CampParams | None = None, log=None) -> Trainer:
    """Full training run writing ``metrics.csv``, ``timing.csv`` and one checkpoint per epoch."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer.create(config, params)
    header = "# config " + json.dumps(config.to_dict(), sort_keys=True)
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as mf, open(
        out / "timing.csv", "w", newline="", encoding="utf-8"
    ) as tf:
        mf.write(header + "\n")
        mw, tw = csv.writer(mf, lineterminator="\n"), csv.writer(tf, lineterminator="\n")
        mw.writerow(METRIC_FIELDS)
        tw.writerow(TIMING_FIELDS)
        for epoch in range(config.epochs):
            rows = train_epoch(trainer, epoch, out, mw, tw)
            mf.flush()
            tf.flush()
            nd.save_checkpoint(out / f"checkpoint_epoch{epoch:03d}.json", trainer.params, checkpoint_meta(trainer, epoch))
            if log is not None:
                log(f"epoch {epoch}: mean reward {np.mean([r['mean_reward'] for r in rows]):.4f}, lr {rows[-1]['lr']:g}")
    last = out / f"checkpoint_epoch{config.epochs - 1:03d}.json"
    final = out / "checkpoint.json"
    final.write_bytes(last.read_bytes())
    return trainer


def load_model(path) -> tuple[camp.CampParams, camp.CampConfig, dict]:
    """Parameters and model config from a checkpoint file."""
    arrays, meta = nd.load_checkpoint(path)
    if "model" not in meta:
        raise ValueError(f"{os.fspath(path)}: checkpoint has no model config")
    config = camp.CampConfig(**meta["model"])
    params = camp.init_params(config, seed=0)
    params.load(arrays)
    return params, config, meta
