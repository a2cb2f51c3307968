"""Constructive decoding MDP: action masks, transitions and rewards for the four tasks.

The batched functions (:func:`reset_batch`, :func:`legal_mask`, :func:`advance`)
are the only place the routing constraints live. The single-state API and the
feasibility checker are thin wrappers that replay through them.

Sequence conventions: TSP sequences list every node once and the tour closes
back to the first node. Depot tasks start with the depot and end with the
depot; CVRP sequences may contain the depot in between.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .instgen import Instance, Task

CAPACITY_TOL = 1e-9


class InfeasibleError(ValueError):
    pass


class IllegalActionError(ValueError):
    pass


def pairwise_distances(coords: np.ndarray) -> np.ndarray:
    diff = coords[..., :, None, :] - coords[..., None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


@dataclass
class InstanceBatch:
    """Instances stacked row-wise (all the same task and size)."""

    task: Task
    coords: np.ndarray  # (M, N, 2)
    dist: np.ndarray  # (M, N, N)
    demand: np.ndarray  # (M, N)
    prize: np.ndarray  # (M, N)
    penalty: np.ndarray  # (M, N)
    threshold: np.ndarray  # (M,)
    max_length: np.ndarray  # (M,)
    depot: int | None

    @property
    def size(self) -> int:
        return self.coords.shape[0]

    @property
    def n(self) -> int:
        return self.coords.shape[1]

    @classmethod
    def from_instances(cls, instances: list[Instance], repeat: int = 1) -> "InstanceBatch":
        task = instances[0].task
        n = instances[0].n
        depot = instances[0].depot
        for inst in instances:
            if inst.task != task or inst.n != n or inst.depot != depot:
                raise ValueError("batched instances must share task, size and depot")
        m = len(instances)

        def feat(name):
            if name not in instances[0].features:
                return np.zeros((m, n))
            return np.stack([i.features[name] for i in instances])

        def glob(name):
            return np.array([i.globals.get(name, 0.0) for i in instances], dtype=np.float64)

        coords = np.stack([i.coords for i in instances]).astype(np.float64)
        arrays = [coords, feat("demand"), feat("prize"), feat("penalty"),
                  glob("prize_threshold"), glob("max_length")]
        if repeat > 1:
            arrays = [np.repeat(a, repeat, axis=0) for a in arrays]
        coords, demand, prize, penalty, thr, tmax = arrays
        return cls(task, coords, pairwise_distances(coords), demand, prize, penalty, thr, tmax, depot)

    def take(self, rows) -> "InstanceBatch":
        rows = np.asarray(rows, dtype=np.int64)
        return InstanceBatch(self.task, self.coords[rows], self.dist[rows], self.demand[rows],
                             self.prize[rows], self.penalty[rows], self.threshold[rows],
                             self.max_length[rows], self.depot)


@dataclass
class StateBatch:
    task: Task
    visited: np.ndarray  # (M, N) bool, customers and TSP nodes only
    current: np.ndarray  # (M,) int, -1 before the first move
    first: np.ndarray  # (M,) int, -1 before the first move
    remaining_capacity: np.ndarray  # (M,)
    length: np.ndarray  # (M,) travelled length so far
    collected_prize: np.ndarray  # (M,)
    done: np.ndarray  # (M,) bool
    steps: np.ndarray  # (M,) number of actions taken
    sequences: list[list[int]] = field(default_factory=list)


def take_states(st: StateBatch, rows) -> StateBatch:
    """Copy of the selected rows (rows may repeat)."""
    rows = np.asarray(rows, dtype=np.int64)
    return StateBatch(
        task=st.task,
        visited=st.visited[rows],
        current=st.current[rows],
        first=st.first[rows],
        remaining_capacity=st.remaining_capacity[rows],
        length=st.length[rows],
        collected_prize=st.collected_prize[rows],
        done=st.done[rows],
        steps=st.steps[rows],
        sequences=[list(st.sequences[r]) for r in rows.tolist()],
    )


def reset_batch(batch: InstanceBatch, first_nodes=None) -> StateBatch:
    m, n = batch.size, batch.n
    st = StateBatch(
        task=batch.task,
        visited=np.zeros((m, n), dtype=bool),
        current=np.full(m, -1, dtype=np.int64),
        first=np.full(m, -1, dtype=np.int64),
        remaining_capacity=np.ones(m),
        length=np.zeros(m),
        collected_prize=np.zeros(m),
        done=np.zeros(m, dtype=bool),
        steps=np.zeros(m, dtype=np.int64),
        sequences=[[] for _ in range(m)],
    )
    if batch.task.has_depot:
        if first_nodes is not None and np.any(np.asarray(first_nodes) != batch.depot):
            raise ValueError(f"{batch.task.value}: the first node is always the depot ({batch.depot})")
        st.current[:] = batch.depot
        st.first[:] = batch.depot
        st.visited[:, batch.depot] = True
        for seq in st.sequences:
            seq.append(batch.depot)
    elif first_nodes is not None:
        fn = np.broadcast_to(np.asarray(first_nodes, dtype=np.int64), (m,))
        if np.any(fn < 0) or np.any(fn >= n):
            raise ValueError(f"first node out of range for N={n}")
        st.current[:] = fn
        st.first[:] = fn
        st.visited[np.arange(m), fn] = True
        for seq, f in zip(st.sequences, fn):
            seq.append(int(f))
    return st


def legal_mask(batch: InstanceBatch, st: StateBatch) -> np.ndarray:
    """Boolean (M, N) mask of legal actions; finished rows are all false."""
    task = batch.task
    rows = np.arange(batch.size)
    if task is Task.TSP:
        mask = ~st.visited
    else:
        dep = batch.depot
        at_depot = st.current == dep
        unvisited = ~st.visited
        if task is Task.CVRP:
            mask = unvisited & (batch.demand <= st.remaining_capacity[:, None] + CAPACITY_TOL)
            mask[:, dep] = ~at_depot
        elif task is Task.OP:
            cur = st.current
            reach = st.length[:, None] + batch.dist[rows, cur] + batch.dist[:, :, dep]
            mask = unvisited & (reach <= batch.max_length[:, None])
            mask[:, dep] = True
        else:
            mask = unvisited.copy()
            all_done = ~unvisited.any(axis=1)
            mask[:, dep] = (st.collected_prize >= batch.threshold) | all_done
    mask = mask & ~st.done[:, None]
    return mask


def advance(batch: InstanceBatch, st: StateBatch, actions: np.ndarray) -> None:
    """Apply one action per unfinished row in place; finished rows are skipped."""
    actions = np.asarray(actions, dtype=np.int64)
    active = ~st.done
    if not active.any():
        return
    mask = legal_mask(batch, st)
    rows = np.nonzero(active)[0]
    a = actions[rows]
    if np.any(a < 0) or np.any(a >= batch.n) or not np.all(mask[rows, a]):
        bad = rows[(a < 0) | (a >= batch.n) | ~mask[rows, np.clip(a, 0, batch.n - 1)]][0]
        raise IllegalActionError(f"illegal action {int(actions[bad])} in row {int(bad)}")
    cur = st.current[rows]
    has_cur = cur >= 0
    step_len = np.where(has_cur, batch.dist[rows, np.maximum(cur, 0), a], 0.0)
    st.length[rows] += step_len
    st.visited[rows, a] = True
    st.first[rows] = np.where(st.first[rows] < 0, a, st.first[rows])
    st.current[rows] = a
    st.steps[rows] += 1
    for r, act in zip(rows.tolist(), a.tolist()):
        st.sequences[r].append(act)
    task = batch.task
    if task is Task.TSP:
        fin = st.visited[rows].all(axis=1)
        st.length[rows] += np.where(fin, batch.dist[rows, a, st.first[rows]], 0.0)
    else:
        dep = batch.depot
        to_depot = a == dep
        if task is Task.CVRP:
            cap = st.remaining_capacity[rows] - batch.demand[rows, a]
            st.remaining_capacity[rows] = np.where(to_depot, 1.0, np.maximum(cap, 0.0))
            fin = to_depot & st.visited[rows].all(axis=1)
        else:
            st.collected_prize[rows] += batch.prize[rows, a]
            fin = to_depot
    st.done[rows] = fin


def batch_rewards(batch: InstanceBatch, st: StateBatch) -> np.ndarray:
    """Rewards of finished rows, read from the accumulated bookkeeping."""
    if not st.done.all():
        raise ValueError("rewards requested before every row finished")
    if batch.task is Task.OP:
        return st.collected_prize.copy()
    cost = st.length.copy()
    if batch.task is Task.PCTSP:
        cost += (batch.penalty * ~st.visited).sum(axis=1)
    return -cost


# ---------------------------------------------------------------- single-state API


@dataclass
class DecodingState:
    visited: np.ndarray
    sequence: list[int]
    current_node: int | None
    remaining_capacity: float = 1.0
    consumed_length: float = 0.0
    collected_prize: float = 0.0
    done: bool = False

    @property
    def t(self) -> int:
        return len(self.sequence)


@dataclass
class Solution:
    sequence: list[int]
    task: Task


def _to_batch(state: DecodingState, task: Task) -> StateBatch:
    cur = -1 if state.current_node is None else state.current_node
    first = state.sequence[0] if state.sequence else -1
    return StateBatch(
        task=task,
        visited=state.visited[None, :].copy(),
        current=np.array([cur], dtype=np.int64),
        first=np.array([first], dtype=np.int64),
        remaining_capacity=np.array([state.remaining_capacity]),
        length=np.array([state.consumed_length]),
        collected_prize=np.array([state.collected_prize]),
        done=np.array([state.done]),
        steps=np.array([len(state.sequence)], dtype=np.int64),
        sequences=[list(state.sequence)],
    )


def _from_batch(st: StateBatch) -> DecodingState:
    cur = int(st.current[0])
    return DecodingState(
        visited=st.visited[0].copy(),
        sequence=list(st.sequences[0]),
        current_node=None if cur < 0 else cur,
        remaining_capacity=float(st.remaining_capacity[0]),
        consumed_length=float(st.length[0]),
        collected_prize=float(st.collected_prize[0]),
        done=bool(st.done[0]),
    )


def reset(instance: Instance, first_node: int | None = None) -> DecodingState:
    batch = InstanceBatch.from_instances([instance])
    fn = None if first_node is None else [first_node]
    return _from_batch(reset_batch(batch, fn))


def legal_actions(state: DecodingState, instance: Instance) -> np.ndarray:
    if state.done:
        raise ValueError("no legal actions in a terminal state")
    batch = InstanceBatch.from_instances([instance])
    return legal_mask(batch, _to_batch(state, instance.task))[0]


def step(state: DecodingState, action: int, instance: Instance) -> DecodingState:
    if state.done:
        raise IllegalActionError("step on a terminal state")
    batch = InstanceBatch.from_instances([instance])
    st = _to_batch(state, instance.task)
    advance(batch, st, np.array([action]))
    return _from_batch(st)


def _diagnose(instance: Instance, state: DecodingState, a: int) -> str:
    task = instance.task
    if not 0 <= a < instance.n:
        return f"index {a} out of range"
    if task is Task.TSP or a != instance.depot:
        if state.visited[a]:
            return f"revisit of node {a}"
    if task is Task.CVRP:
        if a == instance.depot:
            return "depot repeated"
        return f"capacity exceeded at node {a}"
    if task is Task.OP:
        return f"length budget exceeded by visiting node {a}"
    if task is Task.PCTSP:
        return "prize threshold not met before returning to depot"
    return f"illegal action {a}"


def is_feasible(instance: Instance, sequence) -> tuple[bool, str]:
    """Replay ``sequence`` through the state machine; returns (verdict, reason)."""
    seq = [int(x) for x in sequence]
    if not seq:
        return False, "empty sequence"
    task = instance.task
    if task.has_depot and seq[0] != instance.depot:
        return False, "sequence must start at the depot"
    if not 0 <= seq[0] < instance.n:
        return False, f"index {seq[0]} out of range"
    batch = InstanceBatch.from_instances([instance])
    st = reset_batch(batch, [seq[0]])
    for a in seq[1:]:
        if st.done[0]:
            return False, "actions after the terminal state"
        mask = legal_mask(batch, st)[0]
        if not 0 <= a < instance.n or not mask[a]:
            return False, _diagnose(instance, _from_batch(st), a)
        advance(batch, st, np.array([a]))
    if not st.done[0]:
        return False, "incomplete solution"
    return True, "ok"


def reward(instance: Instance, solution) -> float:
    """Objective of a complete solution, recomputed directly from the sequence."""
    seq = list(solution.sequence if isinstance(solution, Solution) else solution)
    ok, why = is_feasible(instance, seq)
    if not ok:
        raise InfeasibleError(f"infeasible {instance.task.value} solution: {why}")
    return sequence_objective(instance, seq)


def sequence_objective(instance: Instance, seq) -> float:
    """Objective of ``seq`` without a feasibility check."""
    x = instance.coords
    idx = np.asarray(seq, dtype=np.int64)
    if instance.task is Task.TSP:
        nxt = np.roll(idx, -1)
    else:
        idx, nxt = idx[:-1], idx[1:]
    d = x[nxt] - x[idx]
    length = float(np.sqrt((d * d).sum(axis=1)).sum())
    if instance.task is Task.OP:
        return float(instance.features["prize"][np.unique(seq)].sum())
    if instance.task is Task.PCTSP:
        unvisited = np.ones(instance.n, dtype=bool)
        unvisited[list(seq)] = False
        length += float(instance.features["penalty"][unvisited].sum())
    return -length
