"""Orthogonal maps of the plane and checks that rewards ignore them."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import comdp
from .instgen import Instance, Task

CENTER = np.array([0.5, 0.5])


@dataclass(frozen=True)
class Orthogonal2:
    matrix: np.ndarray
    angle: float = 0.0
    reflected: bool = False

    @classmethod
    def from_angle(cls, angle: float, reflected: bool = False) -> "Orthogonal2":
        c, s = math.cos(angle), math.sin(angle)
        rot = np.array([[c, -s], [s, c]])
        if reflected:
            rot = rot @ np.diag([1.0, -1.0])
        return cls(rot, float(angle), bool(reflected))

    @classmethod
    def identity(cls) -> "Orthogonal2":
        return cls(np.eye(2))

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.matrix))

    def compose(self, other: "Orthogonal2") -> "Orthogonal2":
        """``self`` applied after ``other``."""
        refl = self.reflected != other.reflected
        ang = self.angle - other.angle if self.reflected else self.angle + other.angle
        return Orthogonal2(self.matrix @ other.matrix, ang % (2 * math.pi), refl)


def sample_orthogonal(rng: np.random.Generator) -> Orthogonal2:
    """Haar-uniform draw from O(2): uniform angle, fair coin for a reflection."""
    angle = rng.uniform(0.0, 2 * math.pi)
    reflected = bool(rng.random() < 0.5)
    return Orthogonal2.from_angle(angle, reflected)


def transform_coords(coords: np.ndarray, q: Orthogonal2, center=CENTER) -> np.ndarray:
    c = np.asarray(center, dtype=np.float64)
    return (coords - c) @ q.matrix.T + c


def transform(instance: Instance, q: Orthogonal2, center=CENTER) -> Instance:
    return instance.replace_coords(transform_coords(instance.coords, q, center))


def dihedral_group() -> list[Orthogonal2]:
    """The 8 symmetries of the square with integer entries, identity first."""
    rots = [np.array(m, dtype=np.float64) for m in
            ([[1, 0], [0, 1]], [[0, -1], [1, 0]], [[-1, 0], [0, -1]], [[0, 1], [-1, 0]])]
    flip = np.diag([1.0, -1.0])
    out = [Orthogonal2(r, k * math.pi / 2, False) for k, r in enumerate(rots)]
    out += [Orthogonal2(r @ flip, k * math.pi / 2, True) for k, r in enumerate(rots)]
    return out


def dihedral_augment(instance: Instance) -> list[Instance]:
    return [transform(instance, q, CENTER) for q in dihedral_group()]


# ---------------------------------------------------------------- verification


@dataclass
class SymmetryReport:
    task: str
    n: int
    trials: int
    deltas: list[float] = field(default_factory=list)
    max_abs_delta: float = 0.0
    optimal_set_match: bool | None = None

    def to_dict(self) -> dict:
        return {"task": self.task, "n": self.n, "trials": self.trials,
                "max_abs_delta": self.max_abs_delta, "deltas": self.deltas,
                "optimal_set_match": self.optimal_set_match}


def random_feasible_sequence(instance: Instance, rng: np.random.Generator) -> list[int]:
    """Uniformly random legal action at every step of the decoding MDP."""
    batch = comdp.InstanceBatch.from_instances([instance])
    st = comdp.reset_batch(batch)
    while not st.done[0]:
        legal = np.flatnonzero(comdp.legal_mask(batch, st)[0])
        comdp.advance(batch, st, np.array([rng.choice(legal)]))
    return st.sequences[0]


def reward_delta(instance: Instance, seq, q: Orthogonal2, center=CENTER) -> float:
    return comdp.reward(instance, seq) - comdp.reward(transform(instance, q, center), seq)


def optimal_set(instance: Instance) -> set[tuple[int, ...]]:
    """Optimal solutions: canonical tour classes for TSP, exact sequences otherwise."""
    from . import oracle

    if instance.task is Task.TSP:
        res = oracle.brute_force_tsp(instance, collect_all=True)
    else:
        res = oracle.exhaustive_search(instance, collect_all=True)
    return set(res.optimal_set)


def verify_problem_symmetry(instance: Instance, trials: int, rng: np.random.Generator,
                            use_oracle: bool = False, center=CENTER) -> SymmetryReport:
    if use_oracle:
        limit = 10 if instance.task is Task.TSP else 7
        if instance.n > limit:
            raise ValueError(f"oracle check needs N <= {limit} for {instance.task.value}, got {instance.n}")
    report = SymmetryReport(instance.task.value, instance.n, trials)
    qs = []
    for _ in range(trials):
        q = sample_orthogonal(rng)
        qs.append(q)
        seq = random_feasible_sequence(instance, rng)
        report.deltas.append(reward_delta(instance, seq, q, center))
    report.max_abs_delta = max((abs(d) for d in report.deltas), default=0.0)
    if use_oracle:
        base = optimal_set(instance)
        report.optimal_set_match = all(optimal_set(transform(instance, q, center)) == base for q in qs)
    return report
