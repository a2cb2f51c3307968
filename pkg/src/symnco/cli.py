"""Command-line entry point: ``symnco {gen,train,eval,verify,oracle,gradcheck}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from pathlib import Path

import numpy as np

from . import evaluate, gradcheck, instgen, oracle, policy, symmetry, trainer

INVARIANCE_TOL = 1e-9


def _gen(args) -> int:
    ds = instgen.make_dataset(args.task, args.n, args.count, args.seed)
    instgen.save_dataset(ds, args.out)
    print(f"wrote {ds.count} {args.task} instances (N={args.n}) to {args.out}")
    return 0


def _train(args) -> int:
    cfg = trainer.TrainConfig.from_json(args.config)
    if args.out:
        cfg.out_dir = args.out
    result = trainer.train(cfg, resume_from=args.resume)
    last = result.metrics[-1] if result.metrics else None
    msg = f"trained {result.opt_state.step} steps; checkpoint {result.checkpoint}"
    if last:
        msg += f"; last mean cost {last['mean_cost']:.4f}"
    print(msg)
    return 0


def _eval(args) -> int:
    params, _, _ = policy.load_checkpoint(args.ckpt)
    ds = instgen.load_dataset(args.data)
    oracle_policy = "exact" if args.oracle == "exact" else args.oracle
    report = evaluate.evaluate(params, ds, args.mode, oracle_policy, seed=args.seed)
    csv_path, json_path = report.write(args.out)
    gap = "" if report.mean_gap is None else f", mean gap {report.mean_gap:.3f}%"
    print(f"{args.mode}: mean cost {report.mean_cost:.6f}{gap}; wrote {csv_path} and {json_path}")
    return 0


def _verify(args) -> int:
    inst = instgen.generate(args.task, args.n, args.seed)
    rng = np.random.Generator(np.random.Philox(args.seed))
    report = symmetry.verify_problem_symmetry(inst, args.trials, rng, use_oracle=args.oracle)
    print(json.dumps(report.to_dict(), indent=2))
    ok = report.max_abs_delta <= INVARIANCE_TOL and report.optimal_set_match is not False
    return 0 if ok else 1


def _solve_one(method: str, instance):
    return oracle.solve(instance, method)


def _oracle(args) -> int:
    ds = instgen.load_dataset(args.data)
    workers = min(evaluate.worker_count(), max(ds.count, 1))
    solve = partial(_solve_one, args.method)
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(solve, ds.instances, chunksize=8))
    else:
        results = [solve(i) for i in ds.instances]
    evaluate.write_references(args.out, results)
    print(f"solved {len(results)} instances with {args.method}; wrote {args.out}")
    return 0


def _gradcheck(args) -> int:
    results = gradcheck.run_suite(args.seed)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="symnco", description="Symmetric REINFORCE for routing problems")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    tasks = [t.value for t in instgen.Task]

    g = sub.add_parser("gen", help="generate a dataset file")
    g.add_argument("--task", choices=tasks, required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_gen)

    t = sub.add_parser("train", help="train from a JSON TrainConfig")
    t.add_argument("--config", required=True)
    t.add_argument("--out")
    t.add_argument("--resume", help="training checkpoint to continue from")
    t.set_defaults(func=_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--mode", default="greedy", help="greedy | sample:M | dihedral8 | ortho:M")
    e.add_argument("--oracle", default="none", help="none | exact | file:PATH")
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=_eval)

    v = sub.add_parser("verify", help="check reward invariance under random orthogonal maps")
    v.add_argument("--task", choices=tasks, required=True)
    v.add_argument("--n", type=int, required=True)
    v.add_argument("--trials", type=int, required=True)
    v.add_argument("--seed", type=int, required=True)
    v.add_argument("--oracle", action="store_true", help="also compare exact optimal sets")
    v.set_defaults(func=_verify)

    o = sub.add_parser("oracle", help="write reference costs for a dataset")
    o.add_argument("--data", required=True)
    o.add_argument("--method", choices=["brute", "heldkarp", "exhaustive"], required=True)
    o.add_argument("--out", required=True)
    o.set_defaults(func=_oracle)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, instgen.DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
