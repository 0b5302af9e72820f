"""Command-line entry point: ``pvrp generate | train | eval | validate``.

Exit codes: 0 success, 1 infeasible solution or failed run, 2 usage or
input error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import camp, oracle, trainer
from .instance import (
    DIST_KINDS,
    PREFERENCES,
    VARIANTS,
    GenConfig,
    GenerationError,
    InstanceFormatError,
    InstanceValidationError,
    generate_set,
    read_instances,
    write_instances,
)
from .validator import Solution, StructuralError, reward_from_totals, totals, validate

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2
METHODS = ("camp-greedy", "camp-sample", "greedy", "random", "exact")


class UsageError(Exception):
    pass


def _header(command: str, config: dict) -> str:
    return f"# pvrp {command} " + json.dumps(config, sort_keys=True)


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


# --- generate -------------------------------------------------------------------------

def cmd_generate(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be positive")
    try:
        cfg = GenConfig(
            n=args.n,
            m=args.m,
            dist_kind=args.dist,
            variant=args.variant,
            alpha=args.alpha,
            seed=args.seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    alpha_range = tuple(args.alpha_range) if args.alpha_range else None
    print(_header("generate", {**vars_of(cfg), "count": args.count, "alpha_range": alpha_range, "out": str(args.out)}))
    try:
        instances = generate_set(cfg, args.count, alpha_range=alpha_range)
    except GenerationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    write_instances(args.out, instances)
    print(f"wrote {len(instances)} instances (dist={args.dist}, variant={args.variant}, seed={args.seed}) to {args.out}")
    return EXIT_OK


def vars_of(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


# --- train ----------------------------------------------------------------------------

def _train_config(args) -> trainer.TrainConfig:
    data: dict = {}
    if args.config is not None:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file {path} does not exist")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}:{exc.lineno}: {exc.msg}") from None
    model = dict(data.pop("model", {}))
    overrides = {
        "epochs": args.epochs,
        "samples_per_epoch": args.samples_per_epoch,
        "batch_size": args.batch_size,
        "augmentations": args.augmentations,
        "lr0": args.lr,
        "m": args.m,
        "variant": args.variant,
        "seed": args.seed,
    }
    data.update({k: v for k, v in overrides.items() if v is not None})
    if args.n is not None:
        data["n_range"] = (args.n, args.n)
    if args.no_reward_balance:
        data["reward_balance"] = False
    if args.no_encoder_comm:
        model["encoder_comm"] = False
    if args.shared_profile:
        model["profile_embeddings"] = False
    try:
        return trainer.TrainConfig(**data, model=camp.CampConfig(**model))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad training config: {exc}") from None


def cmd_train(args) -> int:
    config = _train_config(args)
    print(_header("train", config.to_dict()))
    try:
        trainer.train(config, args.out, log=print)
    except trainer.TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    print(f"checkpoint written to {Path(args.out) / 'checkpoint.json'}")
    return EXIT_OK


# --- eval -----------------------------------------------------------------------------

@dataclass
class EvalRow:
    instance_id: str
    n: int
    m: int
    dist_kind: str
    variant: str
    alpha: float
    method: str
    samples: int
    cost: float
    pref: float
    reward: float
    gap_vs_exact: float | None
    time_ms: float | None

    def cells(self) -> list[str]:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                out.append("")
            elif isinstance(v, float):
                out.append(repr(v))
            else:
                out.append(str(v))
        return out


EVAL_FIELDS = [f.name for f in fields(EvalRow)]


def gap_percent(ref: float, value: float) -> float:
    if ref == 0:
        return 0.0 if value == ref else math.inf
    return (ref - value) / abs(ref) * 100.0


def _row(inst, method, samples, solution: Solution, elapsed_ms) -> EvalRow:
    cost, pref = totals(inst, solution)
    return EvalRow(
        instance_id=inst.id,
        n=inst.n,
        m=inst.m,
        dist_kind=inst.dist_kind,
        variant=inst.variant,
        alpha=inst.alpha,
        method=method,
        samples=samples,
        cost=cost,
        pref=pref,
        reward=reward_from_totals(inst, cost, pref),
        gap_vs_exact=None,
        time_ms=elapsed_ms,
    )


def evaluate(instances, methods, alphas, params=None, model=None, samples=128, seed=0, timing=True):
    """EvalRows for every instance x method x alpha plus the chosen solutions."""
    rows: list[EvalRow] = []
    chosen: list[tuple[EvalRow, Solution]] = []
    for ai, alpha in enumerate(alphas):
        if alpha is None:
            batch = list(instances)
        else:
            # zone objectives ignore alpha, so zone instances are evaluated once
            batch = [i.with_alpha(alpha) if i.variant == PREFERENCES else i for i in instances]
            batch = [i for i in batch if i.variant == PREFERENCES or ai == 0]
        if not batch:
            continue
        per_method: dict[str, list[tuple[Solution, int, float]]] = {}
        for method in methods:
            t0 = time.perf_counter()
            if method == "camp-greedy":
                res = [(s, 1) for s, _ in camp.solve(batch, params, model, mode="greedy")]
            elif method == "camp-sample":
                rng = np.random.default_rng([seed, 1, ai])
                sampled = camp.solve(batch, params, model, "sample", samples, rng)
                # the greedy decode is one more candidate, so sampling never loses to it
                greedy = camp.solve(batch, params, model, mode="greedy")
                res = [(s if r >= rg else sg, samples) for (s, r), (sg, rg) in zip(sampled, greedy)]
            elif method == "greedy":
                res = [(oracle.greedy_solve(i).solution, 1) for i in batch]
            elif method == "random":
                rng = np.random.default_rng([seed, 2, ai])
                res = [(oracle.random_rollout(i, rng).solution, 1) for i in batch]
            elif method == "exact":
                res = [
                    (oracle.exact_solve(i).solution, 1) if oracle.exact_supported(i) else (None, 1) for i in batch
                ]
            else:
                raise UsageError(f"unknown method {method!r}")
            ms = (time.perf_counter() - t0) * 1000.0 / len(batch) if timing else None
            per_method[method] = [(s, k, ms) for s, k in res]
        for j, inst in enumerate(batch):
            ref = None
            if "exact" in per_method and per_method["exact"][j][0] is not None:
                ref = _row(inst, "exact", 1, per_method["exact"][j][0], per_method["exact"][j][2])
            for method in methods:
                sol, k, ms = per_method[method][j]
                if sol is None:
                    continue
                row = ref if method == "exact" else _row(inst, method, k, sol, ms)
                if ref is not None:
                    row.gap_vs_exact = gap_percent(ref.reward, row.reward)
                rows.append(row)
                chosen.append((row, sol))
    order = sorted(range(len(rows)), key=lambda i: (rows[i].instance_id, rows[i].method, rows[i].alpha))
    return [rows[i] for i in order], [chosen[i][1] for i in order]


def pareto_rows(rows: list[EvalRow]) -> list[list[str]]:
    groups: dict[tuple[str, float], list[EvalRow]] = {}
    for r in rows:
        if r.variant == PREFERENCES:
            groups.setdefault((r.method, r.alpha), []).append(r)
    out = []
    for (method, alpha), rs in sorted(groups.items()):
        out.append(
            [
                repr(alpha),
                method,
                str(len(rs)),
                repr(float(np.mean([r.cost for r in rs]))),
                repr(float(np.mean([r.pref for r in rs]))),
                repr(float(np.mean([r.reward for r in rs]))),
            ]
        )
    return out


def cmd_eval(args) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise UsageError(f"unknown methods {unknown}; choose from {', '.join(METHODS)}")
    methods = sorted(set(methods), key=METHODS.index)
    try:
        instances = read_instances(args.instances)
    except (OSError, InstanceFormatError, InstanceValidationError) as exc:
        raise UsageError(str(exc)) from None
    params = model = None
    meta: dict = {}
    if any(m.startswith("camp") for m in methods):
        if args.checkpoint is None:
            raise UsageError("camp methods need --checkpoint")
        try:
            params, model, meta = trainer.load_model(args.checkpoint)
        except (OSError, ValueError, KeyError) as exc:
            print(f"error: cannot load checkpoint: {exc}", file=sys.stderr)
            return EXIT_FAILED
    alphas = args.alphas if args.alphas else [None]
    config = {
        "instances": str(args.instances),
        "checkpoint": None if args.checkpoint is None else str(args.checkpoint),
        "methods": methods,
        "alphas": alphas,
        "samples": args.samples,
        "seed": args.seed,
        "model": None if model is None else model.to_dict(),
    }
    header = _header("eval", config)
    print(header)
    try:
        rows, sols = evaluate(instances, methods, alphas, params, model, args.samples, args.seed, not args.no_timing)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        fh.write(header + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_FIELDS)
        for r in rows:
            w.writerow(r.cells())
    if args.pareto is not None:
        with open(args.pareto, "w", newline="", encoding="utf-8") as fh:
            fh.write(header + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["alpha", "method", "count", "mean_cost", "mean_pref", "mean_reward"])
            w.writerows(pareto_rows(rows))
    if args.solutions_out is not None:
        with open(args.solutions_out, "w", encoding="utf-8") as fh:
            for r, s in zip(rows, sols):
                rec = {"instance_id": r.instance_id, "method": r.method, "alpha": r.alpha, "routes": s.routes}
                fh.write(json.dumps(rec) + "\n")
    for method in methods:
        mine = [r for r in rows if r.method == method]
        if mine:
            gaps = [r.gap_vs_exact for r in mine if r.gap_vs_exact is not None]
            gap = f", mean gap {np.mean(gaps):.2f}%" if gaps else ""
            print(f"{method}: {len(mine)} rows, mean reward {np.mean([r.reward for r in mine]):.4f}{gap}")
    return EXIT_OK


# --- validate -------------------------------------------------------------------------

def read_solutions(path) -> list[tuple[str | None, float | None, Solution]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                sol = Solution(routes=[[int(v) for v in r] for r in rec["routes"]])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise InstanceFormatError(f"{path}:{lineno}: bad solution record ({exc})") from None
            alpha = rec.get("alpha")
            out.append((rec.get("instance_id"), None if alpha is None else float(alpha), sol))
    return out


def cmd_validate(args) -> int:
    try:
        instances = read_instances(args.instances)
        solutions = read_solutions(args.solutions)
    except (OSError, InstanceFormatError, InstanceValidationError) as exc:
        raise UsageError(str(exc)) from None
    by_id = {i.id: i for i in instances}
    print(_header("validate", {"instances": str(args.instances), "solutions": str(args.solutions)}))
    all_ok = True
    for idx, (iid, alpha, sol) in enumerate(solutions):
        if iid is None:
            if idx >= len(instances):
                raise UsageError(f"solution {idx + 1} has no instance_id and no matching instance line")
            inst = instances[idx]
        elif iid in by_id:
            inst = by_id[iid]
        else:
            raise UsageError(f"solution {idx + 1}: unknown instance_id {iid!r}")
        if alpha is not None:
            inst = inst.with_alpha(alpha)
        try:
            report = validate(inst, sol)
        except StructuralError as exc:
            print(f"{inst.id}: INFEASIBLE\n  structure: {exc}")
            all_ok = False
            continue
        status = "feasible" if report.feasible else "INFEASIBLE"
        print(f"{inst.id}: {status}")
        if not report.feasible:
            print(str(report))
            all_ok = False
    return EXIT_OK if all_ok else EXIT_FAILED


# --- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pvrp", description="Profiled vehicle routing: generate, train, evaluate, validate.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a JSONL instance set")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--m", type=int, required=True)
    g.add_argument("--dist", choices=DIST_KINDS, default="random")
    g.add_argument("--variant", choices=VARIANTS, default=PREFERENCES)
    g.add_argument("--count", type=int, default=1280)
    g.add_argument("--alpha", type=float, default=0.1)
    g.add_argument("--alpha-range", type=float, nargs=2, metavar=("LO", "HI"))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", type=Path, required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a CAMP policy")
    t.add_argument("--config", type=Path, help="training config JSON (TrainConfig fields, nested 'model')")
    t.add_argument("--out", type=Path, required=True, help="output directory")
    t.add_argument("--epochs", type=int)
    t.add_argument("--samples-per-epoch", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--augmentations", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--n", type=int, help="fixed client count (overrides n_range)")
    t.add_argument("--m", type=int)
    t.add_argument("--variant", choices=VARIANTS)
    t.add_argument("--seed", type=int)
    t.add_argument("--no-encoder-comm", action="store_true")
    t.add_argument("--no-reward-balance", action="store_true")
    t.add_argument("--shared-profile", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="compare methods on an instance file")
    e.add_argument("--instances", type=Path, required=True)
    e.add_argument("--checkpoint", type=Path)
    e.add_argument("--methods", default=",".join(METHODS))
    e.add_argument("--alphas", type=_floats, help="comma-separated alpha grid (preferences instances)")
    e.add_argument("--samples", type=int, default=128)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", type=Path, required=True)
    e.add_argument("--pareto", type=Path)
    e.add_argument("--solutions-out", type=Path)
    e.add_argument("--no-timing", action="store_true", help="leave time_ms empty (byte-stable output)")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("validate", help="check solutions against instances")
    v.add_argument("--instances", type=Path, required=True)
    v.add_argument("--solutions", type=Path, required=True)
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"pvrp {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
