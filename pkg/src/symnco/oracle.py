"""Reference solvers: brute force and Held-Karp for TSP, exhaustive replay for every task."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import comdp
from .instgen import Instance, Task

OPT_TOL = 1e-9


@dataclass
class OracleResult:
    cost: float
    sequence: list[int]
    n: int
    method: str
    optimal_set: list[tuple[int, ...]] = field(default_factory=list)


def canonical_tour(seq) -> tuple[int, ...]:
    """Rotate to start at the smallest index and orient toward the smaller neighbour."""
    seq = [int(x) for x in seq]
    k = seq.index(min(seq))
    rot = seq[k:] + seq[:k]
    if len(rot) > 2 and rot[-1] < rot[1]:
        rot = [rot[0]] + rot[1:][::-1]
    return tuple(rot)


def _require_tsp(instance: Instance) -> None:
    if instance.task is not Task.TSP:
        raise ValueError(f"TSP solver called on a {instance.task.value} instance")


def brute_force_tsp(instance: Instance, collect_all: bool = False) -> OracleResult:
    """Enumerate every tour with node 0 first and one orientation per cycle."""
    _require_tsp(instance)
    n = instance.n
    if n > 10:
        raise ValueError(f"brute force limited to N <= 10, got {n}")
    d = comdp.pairwise_distances(instance.coords)
    if n == 2:
        tours = np.array([[0, 1]])
    else:
        perms = np.array(list(itertools.permutations(range(1, n))), dtype=np.int64)
        perms = perms[perms[:, 0] < perms[:, -1]] if n > 3 else perms[:1]
        tours = np.hstack([np.zeros((len(perms), 1), dtype=np.int64), perms])
    costs = d[tours, np.roll(tours, -1, axis=1)].sum(axis=1)
    best = int(np.argmin(costs))
    res = OracleResult(float(costs[best]), tours[best].tolist(), n, "brute")
    if collect_all:
        near = np.flatnonzero(costs <= costs[best] + OPT_TOL)
        res.optimal_set = [canonical_tour(tours[i]) for i in near]
    return res


def held_karp(instance: Instance) -> OracleResult:
    """Exact subset DP over tours that start and end at node 0."""
    _require_tsp(instance)
    n = instance.n
    if not 2 <= n <= 18:
        raise ValueError(f"Held-Karp supports 2 <= N <= 18, got {n}")
    d = comdp.pairwise_distances(instance.coords)
    if n == 2:
        return OracleResult(float(2 * d[0, 1]), [0, 1], n, "heldkarp")
    m = n - 1  # nodes 1..n-1 map to bits 0..m-1
    full = (1 << m) - 1
    dp = np.full((1 << m, m), np.inf)
    parent = np.full((1 << m, m), -1, dtype=np.int8)
    for j in range(m):
        dp[1 << j, j] = d[0, j + 1]
    inner = d[1:, 1:]
    masks = np.arange(1 << m)
    popcount = np.array([bin(x).count("1") for x in range(1 << m)])
    for size in range(2, m + 1):
        layer = masks[popcount == size]
        for j in range(m):
            bit = 1 << j
            sj = layer[(layer & bit) != 0]
            prev = sj ^ bit
            cand = dp[prev] + inner[:, j]
            k = np.argmin(cand, axis=1)
            dp[sj, j] = cand[np.arange(len(sj)), k]
            parent[sj, j] = k
    closing = dp[full] + d[1:, 0]
    last = int(np.argmin(closing))
    cost = float(closing[last])
    path = []
    mask, j = full, last
    while j >= 0:
        path.append(j + 1)
        pj = int(parent[mask, j])
        mask ^= 1 << j
        j = pj if mask else -1
    return OracleResult(cost, [0] + path[::-1], n, "heldkarp")


def nearest_neighbor(instance: Instance) -> comdp.Solution:
    """Greedy tour from node 0; ties go to the lowest index."""
    _require_tsp(instance)
    d = comdp.pairwise_distances(instance.coords)
    n = instance.n
    visited = np.zeros(n, dtype=bool)
    seq = [0]
    visited[0] = True
    for _ in range(n - 1):
        row = np.where(visited, np.inf, d[seq[-1]])
        nxt = int(np.argmin(row))
        seq.append(nxt)
        visited[nxt] = True
    return comdp.Solution(seq, Task.TSP)


def exhaustive_search(instance: Instance, collect_all: bool = False) -> OracleResult:
    """Enumerate every complete sequence the decoding MDP allows (small N only)."""
    if instance.n > 7:
        raise ValueError(f"exhaustive search limited to N <= 7, got {instance.n}")
    base = comdp.InstanceBatch.from_instances([instance])
    st = comdp.reset_batch(base)
    seqs: list[list[int]] = []
    rewards: list[np.ndarray] = []
    while st.done.size:
        batch = base.take(np.zeros(st.done.size, dtype=np.int64))
        mask = comdp.legal_mask(batch, st)
        rows, acts = np.nonzero(mask)
        st = comdp.take_states(st, rows)
        batch = base.take(np.zeros(len(rows), dtype=np.int64))
        comdp.advance(batch, st, acts)
        fin = np.flatnonzero(st.done)
        if fin.size:
            done = comdp.take_states(st, fin)
            rewards.append(comdp.batch_rewards(base.take(np.zeros(fin.size, dtype=np.int64)), done))
            seqs.extend(done.sequences)
        st = comdp.take_states(st, np.flatnonzero(~st.done))
    r = np.concatenate(rewards)
    best = int(np.argmax(r))
    res = OracleResult(abs(float(r[best])), seqs[best], instance.n, "exhaustive")
    if collect_all:
        res.optimal_set = [tuple(seqs[i]) for i in np.flatnonzero(r >= r[best] - OPT_TOL)]
    return res


def solve(instance: Instance, method: str) -> OracleResult:
    if method == "brute":
        return brute_force_tsp(instance)
    if method == "heldkarp":
        return held_karp(instance)
    if method == "exhaustive":
        return exhaustive_search(instance)
    raise ValueError(f"unknown oracle method {method!r}")
