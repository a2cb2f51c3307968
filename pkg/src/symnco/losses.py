"""REINFORCE estimators with shared baselines and the invariance regularizer.

Within one step every instance ``P`` is expanded into ``L`` rotated copies
(the first copy is always ``P`` itself) and ``K`` solutions are sampled from
each copy. The problem-symmetric estimator centres rewards over all ``L*K``
samples of ``P``; the solution-symmetric one centres over the ``K`` samples of
the untransformed copy; the invariance loss compares projected encodings of
``P`` and a rotated copy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np

from . import comdp, policy
from . import tensor as T
from .instgen import Instance
from .symmetry import CENTER, Orthogonal2, sample_orthogonal, transform
from .tensor import GradMap, Tape

INVARIANCE_TOL = 1e-9

Sampler = Callable[[np.random.Generator], Orthogonal2]


@dataclass
class SymConfig:
    alpha: float = 0.1
    beta: float = 1.0
    K: int = 4
    L: int = 2
    # "shared" is the symmetric baseline; "none" is plain REINFORCE (comparison arm)
    baseline: str = "shared"
    # rotation centre: "unit" -> (0.5, 0.5), "centroid" -> per-instance mean coordinate
    center: str = "unit"
    force_first_nodes: bool = False

    def validate(self) -> "SymConfig":
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise ValueError(f"alpha and beta must lie in [0, 1], got {self.alpha}, {self.beta}")
        if self.K < 1 or self.L < 1:
            raise ValueError(f"K and L must be >= 1, got K={self.K}, L={self.L}")
        if self.baseline == "shared":
            if self.beta > 0 and self.K < 2:
                raise ValueError("beta > 0 needs K >= 2 (a single-sample baseline zeroes every advantage)")
            if self.K * self.L < 2:
                raise ValueError("the shared baseline needs L*K >= 2")
        elif self.baseline != "none":
            raise ValueError(f"unknown baseline {self.baseline!r}")
        if self.center not in ("unit", "centroid"):
            raise ValueError(f"unknown center {self.center!r}")
        return self


@dataclass
class GradEstimate:
    grads: GradMap
    baseline: np.ndarray
    advantages: np.ndarray
    advantage_sum: float
    metrics: dict = field(default_factory=dict)


def centered(rewards: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rewards minus their group mean over the last axis, rounded once from exact values.

    Exact rational arithmetic makes the advantages independent of any constant
    reward offset that is itself exactly representable.
    """
    r = np.asarray(rewards, dtype=np.float64)
    flat = r.reshape(-1, r.shape[-1])
    adv = np.empty_like(flat)
    base = np.empty(flat.shape[0])
    n = flat.shape[1]
    for i, row in enumerate(flat):
        fr = [Fraction(x) for x in row.tolist()]
        mean = sum(fr, Fraction(0)) / n
        base[i] = float(mean)
        adv[i] = [float(x - mean) for x in fr]
    return adv.reshape(r.shape), base.reshape(r.shape[:-1])


def _center_of(instance: Instance, mode: str) -> np.ndarray:
    return instance.coords.mean(axis=0) if mode == "centroid" else CENTER


def _zero_sum_check(adv: np.ndarray, rewards: np.ndarray) -> float:
    s = float(np.abs(adv.sum(axis=-1)).max()) if adv.size else 0.0
    bound = 1e-10 * adv.shape[-1] * max(float(np.abs(rewards).max()), 1.0)
    if s > bound:
        raise AssertionError(f"advantage sum {s:.3g} exceeds {bound:.3g}")
    return s


def _first_nodes(instances, cfg: SymConfig, rng, L: int):
    if not cfg.force_first_nodes or instances[0].task.has_depot:
        return None
    n = instances[0].n
    if cfg.K > n:
        raise ValueError(f"cannot force {cfg.K} distinct first nodes on N={n}")
    starts = []
    for _ in instances:
        s = np.arange(n) if cfg.K == n else rng.choice(n, size=cfg.K, replace=False)
        starts.extend([s] * L)
    return np.stack(starts)


@dataclass
class SampledGroup:
    transforms: list[list[Orthogonal2]]  # B x L
    transformed: list[Instance]  # B*L
    rollouts: policy.BatchRollout
    rewards: np.ndarray  # (B, L, K), on the transformed instances
    invariance_gap: float


def sample_group(params: policy.ParamSet, instances: list[Instance], L: int, K: int,
                 rng: np.random.Generator, tape: Tape, sampler: Sampler = sample_orthogonal,
                 center: str = "unit", first_nodes=None) -> SampledGroup:
    """Draw L-1 transforms per instance (identity first), then K rollouts per copy."""
    qs, transformed = [], []
    for inst in instances:
        row = [Orthogonal2.identity()] + [sampler(rng) for _ in range(L - 1)]
        qs.append(row)
        c = _center_of(inst, center)
        transformed.extend(inst if q is row[0] else transform(inst, q, c) for q in row)
    br = policy.rollout_batch(params, transformed, K, "sample", rng, first_nodes, tape)
    b = len(instances)
    rewards = br.rewards.reshape(b, L, K)
    # rewards of the same sequences on the untransformed instance must agree
    gap = 0.0
    for bi, inst in enumerate(instances):
        for j in range(L * K):
            seq = br.sequences[(bi * L) * K + j]
            gap = max(gap, abs(comdp.sequence_objective(inst, seq) - rewards[bi].reshape(-1)[j]))
    if gap > INVARIANCE_TOL:
        raise AssertionError(f"reward changed under an orthogonal transform by {gap:.3g}")
    return SampledGroup(qs, transformed, br, rewards, gap)


def reinforce_weights(rewards: np.ndarray, beta: float, baseline: str = "shared"):
    """Per-sample weights ``w`` such that the surrogate is ``sum(w * loglik)``.

    ``rewards`` is (B, L, K). Returns (weights, ps_advantages, ss_advantages,
    ps_baseline, ss_baseline); weights already include the 1/B batch mean.
    """
    b, L, K = rewards.shape
    if baseline == "none":
        adv_ps, base_ps = rewards.copy(), np.zeros(b)
    else:
        adv_ps, base_ps = centered(rewards.reshape(b, L * K))
        adv_ps = adv_ps.reshape(b, L, K)
    w = -adv_ps / (L * K)
    adv_ss = np.zeros((b, K))
    base_ss = np.zeros(b)
    if beta > 0:
        if baseline == "none":
            adv_ss = rewards[:, 0, :].copy()
        else:
            adv_ss, base_ss = centered(rewards[:, 0, :])
        w[:, 0, :] = w[:, 0, :] - beta * adv_ss / K
    return w / b, adv_ps, adv_ss, base_ps, base_ss


def invariance_value(params: policy.ParamSet, enc_a: policy.Encoding, enc_b: policy.Encoding,
                     tape: Tape) -> T.Tensor:
    """Per-instance negative cosine similarity between projected encodings, shape (B,)."""
    if params.config.invariance_target == "per_node":
        za = policy.project(params, enc_a.node_embeddings, tape)
        zb = policy.project(params, enc_b.node_embeddings, tape)
        return T.scale(T.mean(T.cosine_similarity(za, zb), axis=-1), -1.0)
    za = policy.project(params, enc_a.graph_embedding, tape)
    zb = policy.project(params, enc_b.graph_embedding, tape)
    return T.scale(T.cosine_similarity(za, zb), -1.0)


def _select_copy(enc: policy.Encoding, b: int, L: int, l: int) -> policy.Encoding:
    node, graph = enc.node_embeddings, enc.graph_embedding
    n, d = node.shape[1:]
    idx = np.full((b, 1), l)
    g = T.reshape(T.gather_rows(T.reshape(graph, (b, L, d)), idx), (b, d))
    nd = T.reshape(T.gather_rows(T.reshape(node, (b, L, n * d)), idx), (b, n, d))
    return policy.Encoding(nd, g)


def total_loss_batch(params: policy.ParamSet, instances: list[Instance], config: SymConfig,
                     rng: np.random.Generator, sampler: Sampler = sample_orthogonal) -> GradEstimate:
    """Gradient of the batch-mean total loss: ps + beta * ss + alpha * inv."""
    cfg = config.validate()
    L, K, b = cfg.L, cfg.K, len(instances)
    tape = Tape()
    fn = _first_nodes(instances, cfg, rng, L)
    grp = sample_group(params, instances, L, K, rng, tape, sampler, cfg.center, fn)
    w, adv_ps, adv_ss, base_ps, base_ss = reinforce_weights(grp.rewards, cfg.beta, cfg.baseline)
    if cfg.baseline == "shared":
        adv_sum = _zero_sum_check(adv_ps.reshape(b, -1), grp.rewards)
        if cfg.beta > 0:
            adv_sum = max(adv_sum, _zero_sum_check(adv_ss, grp.rewards[:, 0, :]))
    else:
        adv_sum = float(np.abs(adv_ps.reshape(b, -1).sum(axis=-1)).max())
    loglik = T.reshape(grp.rollouts.log_likelihood, (b, L, K))
    loss = T.sum(loglik * w)

    enc = grp.rollouts.encoding
    base_enc = _select_copy(enc, b, L, 0)
    if L >= 2:
        inv_qs = [row[1] for row in grp.transforms]
        other = _select_copy(enc, b, L, 1)
    else:
        inv_qs = [sampler(rng) for _ in instances]
        rotated = [transform(inst, q, _center_of(inst, cfg.center)) for inst, q in zip(instances, inv_qs)]
        other = policy.encode_batch(params, rotated, tape)
    inv = invariance_value(params, base_enc, other, tape)
    if cfg.alpha > 0:
        loss = loss + T.scale(T.mean(inv), cfg.alpha)
    grads = T.backward(tape, loss)

    # OP reports collected prize (higher is better); the others report tour cost
    flat = grp.rewards.reshape(b, -1)
    maximize = instances[0].task.maximize
    best = flat.max(axis=1) if maximize else -flat.max(axis=1)
    metrics = {
        "mean_reward": float(grp.rewards.mean()),
        "mean_cost": float(grp.rewards.mean() if maximize else -grp.rewards.mean()),
        "best_cost": float(best.mean()),
        "loss_inv": float(inv.data.mean()),
        "baseline": float(base_ps.mean()),
        "baseline_ss": float(base_ss.mean()),
        "invariance_gap": float(grp.invariance_gap),
    }
    return GradEstimate(grads, base_ps, adv_ps, adv_sum, metrics)


def total_loss_step(params, instance: Instance, config: SymConfig, rng: np.random.Generator,
                    sampler: Sampler = sample_orthogonal) -> GradEstimate:
    return total_loss_batch(params, [instance], config, rng, sampler)


def _pure_reinforce(params, instance, L, K, beta_ss, rng, sampler, first_nodes=None) -> GradEstimate:
    tape = Tape()
    fn = None if first_nodes is None else np.asarray(first_nodes)[None, :].repeat(L, axis=0)
    grp = sample_group(params, [instance], L, K, rng, tape, sampler, "unit", fn)
    if beta_ss:
        _, _, adv, _, base = reinforce_weights(grp.rewards, 1.0)
        w = np.zeros_like(grp.rewards)
        w[:, 0, :] = -adv / K
        adv_out, base_out = adv, base
    else:
        w, adv_out, _, base_out, _ = reinforce_weights(grp.rewards, 0.0)
    loglik = T.reshape(grp.rollouts.log_likelihood, (1, L, K))
    grads = T.backward(tape, T.sum(loglik * w))
    adv_sum = _zero_sum_check(adv_out.reshape(1, -1), grp.rewards)
    est = GradEstimate(grads, base_out, adv_out, adv_sum)
    est.metrics = {"rewards": grp.rewards.copy(), "sequences": grp.rollouts.sequences,
                   "transformed": grp.transformed}
    return est


def grad_ss(params, instance: Instance, K: int, rng: np.random.Generator,
            first_nodes=None) -> GradEstimate:
    """Solution-symmetric estimator: K samples of P, baseline = their mean reward."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if first_nodes is not None:
        first_nodes = list(first_nodes)
        if len(first_nodes) != K or len(set(first_nodes)) != K:
            raise ValueError("first_nodes must list K distinct nodes")
    return _pure_reinforce(params, instance, 1, K, True, rng, sample_orthogonal, first_nodes)


def grad_ps(params, instance: Instance, L: int, K: int, rng: np.random.Generator,
            sampler: Sampler = sample_orthogonal) -> GradEstimate:
    """Problem-symmetric estimator over L transformed copies with K samples each."""
    if L < 1 or K < 1 or L * K < 2:
        raise ValueError(f"need L, K >= 1 and L*K >= 2, got L={L}, K={K}")
    return _pure_reinforce(params, instance, L, K, False, rng, sampler)


def loss_inv(params, instance: Instance, q: Orthogonal2, center=CENTER) -> tuple[float, GradMap]:
    """Negative cosine similarity of projected encodings of P and Q(P), with its gradient."""
    tape = Tape()
    enc = policy.encode_batch(params, [instance, transform(instance, q, center)], tape)
    a = _select_copy(enc, 1, 2, 0)
    b = _select_copy(enc, 1, 2, 1)
    value = T.reshape(invariance_value(params, a, b, tape), ())
    return value.item(), T.backward(tape, value)


def surrogate_grad(params, instances: list[Instance], sequences: list[list[int]], weights: np.ndarray,
                   first_nodes=None) -> tuple[float, GradMap]:
    """Gradient of ``sum(weights * loglik)`` for frozen trajectories (teacher forcing).

    ``instances`` are the (possibly transformed) instances the sequences were
    sampled on, one per group of ``K = len(sequences) / len(instances)`` rows.
    """
    k = len(sequences) // len(instances)
    tape = Tape()
    br = policy.rollout_batch(params, instances, k, "replay", first_nodes=first_nodes,
                              forced=sequences, tape=tape)
    s = T.sum(br.log_likelihood * np.asarray(weights).reshape(len(instances), k))
    return s.item(), T.backward(tape, s)
