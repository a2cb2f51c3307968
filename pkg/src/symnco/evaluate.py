"""Greedy and multi-start evaluation, optimality gaps, and evaluation reports."""

from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import comdp, instgen, oracle, policy
from .instgen import Instance
from .policy import ParamSet
from .symmetry import CENTER, Orthogonal2, dihedral_group, sample_orthogonal, transform

RESCORE_TOL = 1e-9


def worker_count() -> int:
    """Worker cap from SNCO_PARALLELISM (default: all cores)."""
    cores = os.cpu_count() or 1
    raw = os.environ.get("SNCO_PARALLELISM")
    if not raw:
        return cores
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"SNCO_PARALLELISM must be an integer, got {raw!r}") from None
    if n < 1:
        raise ValueError("SNCO_PARALLELISM must be >= 1")
    return min(n, cores)


def gap_percent(cost: float, reference_cost: float, maximize: bool = False) -> float:
    if reference_cost <= 0:
        raise ValueError(f"reference cost must be positive, got {reference_cost}")
    diff = reference_cost - cost if maximize else cost - reference_cost
    return float(100.0 * diff / reference_cost)


def cost_of(task, reward):
    """Reported objective: tour cost for minimisation tasks, collected prize for OP."""
    r = np.asarray(reward, dtype=np.float64)
    return r if instgen.Task.parse(task).maximize else -r


def parse_mode(mode: str) -> tuple[str, int]:
    if mode in ("greedy", "dihedral8"):
        return mode, {"greedy": 1, "dihedral8": 8}[mode]
    kind, _, count = mode.partition(":")
    if kind in ("sample", "ortho") and count.isdigit() and int(count) >= 1:
        return kind, int(count)
    raise ValueError(f"unknown mode {mode!r}; expected greedy, sample:M, dihedral8 or ortho:M")


@dataclass
class MultistartResult:
    best: policy.Rollout
    costs: list[float]

    @property
    def candidates(self) -> int:
        return len(self.costs)


def _candidate_rngs(seed: int, count: int) -> list[np.random.Generator]:
    # candidate j always gets the same stream, so candidate sets are nested in M
    return [np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, j]))) for j in range(count)]


def _multistart_batch(params: ParamSet, instances: list[Instance], mode: str,
                      seeds: list[int]) -> list[MultistartResult]:
    kind, m = parse_mode(mode)
    b = len(instances)
    task = instances[0].task
    if kind == "greedy":
        br = policy.rollout_batch(params, instances, 1, "greedy")
        return [MultistartResult(
            policy.Rollout(comdp.Solution(br.sequences[i], task), float(br.log_likelihood.data[i, 0]),
                           br.step_log_probs[i], float(br.rewards[i, 0])),
            [float(cost_of(task, br.rewards[i, 0]))]) for i in range(b)]

    if kind == "sample":
        greedy = policy.rollout_batch(params, instances, 1, "greedy")
        rngs = [g for s in seeds for g in _candidate_rngs(s, m)]
        sampled = policy.rollout_batch(params, instances, m, "sample", rngs)
        out = []
        for i in range(b):
            seqs = [greedy.sequences[i]] + sampled.sequences[i * m:(i + 1) * m]
            lls = [greedy.log_likelihood.data[i, 0]] + list(sampled.log_likelihood.data[i])
            steps = [greedy.step_log_probs[i]] + sampled.step_log_probs[i * m:(i + 1) * m]
            rewards = np.concatenate([[greedy.rewards[i, 0]], sampled.rewards[i]])
            out.append(_pick(instances[i], seqs, rewards, lls, steps, rescore=False))
        return out

    if kind == "dihedral8":
        qs = [dihedral_group() for _ in instances]
    else:
        qs = [[Orthogonal2.identity()] + [sample_orthogonal(g) for g in _candidate_rngs(s, m)] for s in seeds]
    images = [transform(inst, q, CENTER) for inst, row in zip(instances, qs) for q in row]
    br = policy.rollout_batch(params, images, 1, "greedy")
    c = len(qs[0])
    out = []
    for i in range(b):
        sl = slice(i * c, (i + 1) * c)
        out.append(_pick(instances[i], br.sequences[sl], br.rewards[sl, 0], list(br.log_likelihood.data[sl, 0]),
                         br.step_log_probs[sl], rescore=True))
    return out


def _pick(instance: Instance, seqs, image_rewards, lls, steps, rescore: bool) -> MultistartResult:
    rewards = np.asarray(image_rewards, dtype=np.float64)
    if rescore:
        on_p = np.array([comdp.sequence_objective(instance, s) for s in seqs])
        gap = float(np.abs(on_p - rewards).max())
        if gap > RESCORE_TOL:
            raise AssertionError(f"image reward differs from reward on the original instance by {gap:.3g}")
        rewards = on_p
    # reward is maximised for every task; first index wins ties so greedy/identity is preferred
    j = int(np.argmax(rewards))
    best = policy.Rollout(comdp.Solution(list(seqs[j]), instance.task), float(lls[j]), list(steps[j]),
                          float(rewards[j]))
    return MultistartResult(best, [float(x) for x in cost_of(instance.task, rewards)])


def multistart(params: ParamSet, instance: Instance, strategy: str,
               rng: np.random.Generator) -> MultistartResult:
    """Best of several candidate solutions; greedy (or the identity image) is always a candidate.

    ``strategy`` is "sample:M", "dihedral8" or "ortho:M". Candidates built on
    transformed images are re-scored on ``instance`` itself.
    """
    seed = int(rng.integers(0, 2 ** 63))
    return _multistart_batch(params, [instance], strategy, [seed])[0]


@dataclass
class EvalReport:
    mode: str
    costs: list[float]
    mean_cost: float
    seconds: float
    gaps: list[float] | None = None
    mean_gap: float | None = None
    sequences: list[list[int]] = field(default_factory=list)
    seed: int = 0
    fingerprint: str = ""

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("costs"), d.pop("gaps"), d.pop("sequences")
        d["count"] = len(self.costs)
        return d

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out / "eval.csv", out / "summary.json"
        with csv_path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "cost", "gap", "sequence", "fingerprint", "seed"])
            for i, c in enumerate(self.costs):
                gap = "" if self.gaps is None else repr(self.gaps[i])
                w.writerow([i, repr(c), gap, " ".join(map(str, self.sequences[i])), self.fingerprint, self.seed])
        json_path.write_text(json.dumps(self.summary(), indent=2, sort_keys=True))
        return csv_path, json_path


def fingerprint(params: ParamSet, mode: str, oracle_policy: str, seed: int) -> str:
    h = hashlib.sha256()
    h.update(json.dumps({"model": asdict(params.config), "mode": mode, "oracle": oracle_policy,
                         "seed": seed}, sort_keys=True).encode())
    for name in sorted(params.tensors):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params.tensors[name], dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def _exact_cost(instance: Instance) -> float:
    if instance.task is instgen.Task.TSP:
        return oracle.held_karp(instance).cost
    return oracle.exhaustive_search(instance).cost


def exact_references(instances: list[Instance]) -> np.ndarray | None:
    """Exact optima when the instances are small enough, else None."""
    if not instances:
        return np.zeros(0)
    limit = 18 if instances[0].task is instgen.Task.TSP else 7
    if instances[0].n > limit:
        return None
    workers = min(worker_count(), len(instances))
    if workers > 1 and len(instances) >= 32:
        with ProcessPoolExecutor(workers) as pool:
            return np.array(list(pool.map(_exact_cost, instances, chunksize=8)))
    return np.array([_exact_cost(i) for i in instances])


def read_references(path) -> np.ndarray:
    """Costs from an ``index,cost,sequence`` file, ordered by index."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or not {"index", "cost"} <= set(rows[0]):
        raise ValueError(f"{path}: expected columns index,cost,sequence")
    idx = [int(r["index"]) for r in rows]
    if sorted(idx) != list(range(len(rows))):
        raise ValueError(f"{path}: indices must be 0..{len(rows) - 1}")
    out = np.empty(len(rows))
    for i, r in zip(idx, rows):
        out[i] = float(r["cost"])
    return out


def write_references(path, results: list[oracle.OracleResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "cost", "sequence"])
        for i, r in enumerate(results):
            w.writerow([i, repr(float(r.cost)), " ".join(map(str, r.sequence))])


def resolve_references(instances: list[Instance], oracle_policy: str) -> np.ndarray | None:
    if oracle_policy == "none":
        return None
    if oracle_policy in ("exact", "exact_if_small"):
        return exact_references(instances)
    if oracle_policy.startswith("file:"):
        refs = read_references(oracle_policy[5:])
        if len(refs) != len(instances):
            raise ValueError(f"reference file has {len(refs)} costs for {len(instances)} instances")
        return refs
    raise ValueError(f"unknown oracle policy {oracle_policy!r}")


def evaluate(params: ParamSet, instances, mode: str = "greedy", oracle_policy: str = "none",
             seed: int = 0, chunk: int = 64) -> EvalReport:
    """Evaluate on a dataset (or instance list); gaps are filled when references exist."""
    if isinstance(instances, instgen.Dataset):
        instances = instances.instances
    instances = list(instances)
    if instances and instances[0].task is not params.config.task_enum:
        raise ValueError(f"dataset task {instances[0].task.value} != model task {params.config.task}")
    parse_mode(mode)
    refs = resolve_references(instances, oracle_policy)
    seeds = instgen.instance_seeds(seed, len(instances))
    t0 = time.perf_counter()
    results: list[MultistartResult] = []
    for start in range(0, len(instances), chunk):
        sl = slice(start, start + chunk)
        results.extend(_multistart_batch(params, instances[sl], mode, seeds[sl]))
    seconds = time.perf_counter() - t0
    costs = [float(cost_of(inst.task, r.best.reward)) for inst, r in zip(instances, results)]
    for inst, r in zip(instances, results):
        ok, why = comdp.is_feasible(inst, r.best.solution.sequence)
        if not ok:
            raise AssertionError(f"emitted an infeasible solution: {why}")
    report = EvalReport(mode, costs, float(np.mean(costs)) if costs else 0.0, seconds,
                        sequences=[list(map(int, r.best.solution.sequence)) for r in results], seed=seed,
                        fingerprint=fingerprint(params, mode, oracle_policy, seed))
    if refs is not None:
        maximize = instances[0].task.maximize
        report.gaps = [gap_percent(c, ref, maximize) for c, ref in zip(costs, refs)]
        report.mean_gap = float(np.mean(report.gaps))
    return report


def projection_cosine(params: ParamSet, instances: list[Instance], seed: int = 0) -> float:
    """Mean cosine similarity of projected encodings of P and Q(P) for one random Q per instance."""
    rng = np.random.Generator(np.random.Philox(seed))
    qs = [sample_orthogonal(rng) for _ in instances]
    images = [x for inst, q in zip(instances, qs) for x in (inst, transform(inst, q, CENTER))]
    enc = policy.encode_batch(params, images)
    target = enc.graph_embedding.data if params.config.invariance_target == "pooled" else enc.node_embeddings.data
    z = policy.project(params, policy.Tape(record=False).const(target)).data
    a, b = z[0::2], z[1::2]
    cos = (a * b).sum(-1) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))
    return float(cos.mean())
