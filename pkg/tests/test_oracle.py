import time

import numpy as np
import pytest

from symnco import comdp, instgen, oracle, symmetry
from symnco.instgen import Instance, Task

SQUARE = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


def test_square_brute_force():
    res = oracle.brute_force_tsp(Instance(Task.TSP, SQUARE.copy()), collect_all=True)
    assert res.cost == pytest.approx(4.0, abs=1e-12)
    assert res.optimal_set == [(0, 1, 2, 3)]


def test_three_nodes_single_class():
    inst = instgen.generate("tsp", 3, 0)
    res = oracle.brute_force_tsp(inst, collect_all=True)
    assert len(res.optimal_set) == 1


def test_collinear_held_karp():
    inst = Instance(Task.TSP, np.array([[0.0, 0.0], [0.5, 0.0], [1.0, 0.0]]))
    assert oracle.held_karp(inst).cost == pytest.approx(2.0, abs=1e-12)


def test_brute_force_and_held_karp_agree():
    for inst in instgen.generate_many("tsp", 8, 50, 1):
        a, b = oracle.brute_force_tsp(inst), oracle.held_karp(inst)
        assert abs(a.cost - b.cost) <= 1e-12
        assert abs(-comdp.reward(inst, b.sequence) - b.cost) <= 1e-12


def test_held_karp_speed_n15():
    inst = instgen.generate("tsp", 15, 0)
    t0 = time.perf_counter()
    oracle.held_karp(inst)
    assert time.perf_counter() - t0 < 5.0


def test_size_limits():
    with pytest.raises(ValueError):
        oracle.brute_force_tsp(instgen.generate("tsp", 11, 0))
    with pytest.raises(ValueError):
        oracle.held_karp(instgen.generate("tsp", 19, 0))
    with pytest.raises(ValueError):
        oracle.exhaustive_search(instgen.generate("cvrp", 8, 0))
    with pytest.raises(ValueError, match="TSP solver"):
        oracle.held_karp(instgen.generate("cvrp", 5, 0))


def test_nearest_neighbor():
    sq = Instance(Task.TSP, SQUARE.copy())
    sol = oracle.nearest_neighbor(sq)
    assert sol.sequence == [0, 1, 2, 3]
    assert -comdp.reward(sq, sol) == pytest.approx(4.0)
    for inst in instgen.generate_many("tsp", 12, 10, 2):
        nn = oracle.nearest_neighbor(inst)
        assert nn.sequence == oracle.nearest_neighbor(inst).sequence
        assert -comdp.reward(inst, nn) >= oracle.held_karp(inst).cost - 1e-12


def test_exhaustive_matches_held_karp_on_tsp():
    for inst in instgen.generate_many("tsp", 7, 5, 3):
        assert oracle.exhaustive_search(inst).cost == pytest.approx(oracle.held_karp(inst).cost, abs=1e-12)


@pytest.mark.parametrize("task", ["cvrp", "pctsp", "op"])
def test_exhaustive_returns_feasible_best(task):
    inst = instgen.generate(task, 7, 4)
    res = oracle.exhaustive_search(inst, collect_all=True)
    assert comdp.is_feasible(inst, res.sequence)[0]
    assert abs(comdp.reward(inst, res.sequence)) == pytest.approx(res.cost, abs=1e-12)
    rng = np.random.Generator(np.random.Philox(0))
    for _ in range(30):
        seq = symmetry.random_feasible_sequence(inst, rng)
        r = comdp.reward(inst, seq)
        best = res.cost if task == "op" else -res.cost
        assert r <= best + 1e-12
    assert tuple(res.sequence) in res.optimal_set


def test_held_karp_invariant_under_orthogonal_maps():
    rng = np.random.Generator(np.random.Philox(9))
    for inst in instgen.generate_many("tsp", 10, 5, 4):
        base = oracle.held_karp(inst).cost
        for _ in range(3):
            q = symmetry.sample_orthogonal(rng)
            assert abs(oracle.held_karp(symmetry.transform(inst, q)).cost - base) <= 1e-9


def test_canonical_tour():
    assert oracle.canonical_tour([2, 3, 0, 1]) == (0, 1, 2, 3)
    assert oracle.canonical_tour([0, 3, 2, 1]) == (0, 1, 2, 3)
    assert oracle.solve(instgen.generate("tsp", 6, 0), "brute").method == "brute"
    with pytest.raises(ValueError):
        oracle.solve(instgen.generate("tsp", 6, 0), "concorde")
