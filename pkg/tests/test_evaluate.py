import json

import numpy as np
import pytest

from symnco import comdp, evaluate, instgen, oracle, policy
from symnco.policy import ModelConfig


def philox(seed):
    return np.random.Generator(np.random.Philox(seed))


@pytest.fixture(scope="module")
def tsp_params():
    return policy.init_params(ModelConfig(task="tsp"), 0)


def test_gap_percent_examples():
    assert evaluate.gap_percent(7.76, 7.76) == 0.0
    assert evaluate.gap_percent(8.536, 7.76) == pytest.approx(10.0, abs=1e-12)
    assert evaluate.gap_percent(33.19, 33.19, maximize=True) == 0.0
    assert evaluate.gap_percent(30.0, 40.0, maximize=True) == pytest.approx(25.0)
    with pytest.raises(ValueError):
        evaluate.gap_percent(1.0, 0.0)


def test_gap_uses_full_precision():
    # 7.85 vs 7.76 on rounded values is 1.16%; unrounded inputs give a different gap
    assert evaluate.gap_percent(7.85, 7.76) == pytest.approx(1.1598, abs=1e-4)
    assert evaluate.gap_percent(7.8407, 7.7603) == pytest.approx(1.036, abs=1e-3)


def test_parse_mode():
    assert evaluate.parse_mode("greedy") == ("greedy", 1)
    assert evaluate.parse_mode("ortho:32") == ("ortho", 32)
    for bad in ("ortho:0", "beam:4", "sample"):
        with pytest.raises(ValueError):
            evaluate.parse_mode(bad)


@pytest.mark.parametrize("task", ["tsp", "cvrp", "pctsp", "op"])
@pytest.mark.parametrize("strategy", ["sample:6", "dihedral8", "ortho:5"])
def test_multistart_dominates_greedy(task, strategy):
    ps = policy.init_params(ModelConfig(task=task), 1)
    for inst in instgen.generate_many(task, 9, 3, 2):
        greedy = policy.rollout(ps, inst)
        res = evaluate.multistart(ps, inst, strategy, philox(0))
        assert res.best.reward >= greedy.reward - 1e-12
        assert comdp.is_feasible(inst, res.best.solution.sequence)[0]
        assert res.best.reward == pytest.approx(comdp.reward(inst, res.best.solution), abs=1e-12)


def test_candidate_counts(tsp_params):
    inst = instgen.generate("tsp", 8, 0)
    assert evaluate.multistart(tsp_params, inst, "dihedral8", philox(0)).candidates == 8
    assert evaluate.multistart(tsp_params, inst, "ortho:4", philox(0)).candidates == 5
    assert evaluate.multistart(tsp_params, inst, "sample:4", philox(0)).candidates == 5


@pytest.mark.parametrize("kind", ["sample", "ortho"])
def test_multistart_monotone_in_m(tsp_params, kind):
    inst = instgen.generate("tsp", 10, 4)
    costs = [-evaluate.multistart(tsp_params, inst, f"{kind}:{m}", philox(7)).best.reward for m in (1, 2, 4, 8, 16)]
    assert all(b <= a for a, b in zip(costs, costs[1:]))


def test_report_means_and_oracle_self_gap(tsp_params, tmp_path):
    insts = instgen.generate_many("tsp", 7, 12, 3)
    rep = evaluate.evaluate(tsp_params, insts, "greedy", "exact")
    assert rep.mean_cost == float(np.mean(rep.costs))
    assert rep.mean_gap == float(np.mean(rep.gaps))
    opt = np.array([oracle.held_karp(i).cost for i in insts])
    assert rep.mean_cost > opt.mean()
    assert min(rep.gaps) >= -1e-9
    # the oracle's own costs as references against themselves
    evaluate.write_references(tmp_path / "ref.csv", [oracle.held_karp(i) for i in insts])
    refs = evaluate.read_references(tmp_path / "ref.csv")
    assert np.array_equal(refs, opt)
    assert np.allclose([evaluate.gap_percent(c, c) for c in refs], 0.0)
    csv_path, json_path = rep.write(tmp_path / "out")
    summary = json.loads(json_path.read_text())
    assert summary["count"] == 12 and summary["fingerprint"] == rep.fingerprint
    assert csv_path.read_text().splitlines()[0] == "index,cost,gap,sequence,fingerprint,seed"


def test_reference_file_mismatch(tsp_params, tmp_path):
    insts = instgen.generate_many("tsp", 6, 4, 0)
    evaluate.write_references(tmp_path / "ref.csv", [oracle.held_karp(i) for i in insts[:3]])
    with pytest.raises(ValueError, match="3 costs for 4"):
        evaluate.evaluate(tsp_params, insts, "greedy", f"file:{tmp_path / 'ref.csv'}")


def test_dataset_task_must_match(tsp_params):
    with pytest.raises(ValueError, match="dataset task"):
        evaluate.evaluate(tsp_params, instgen.make_dataset("op", 6, 2, 0), "greedy")


def test_deterministic_modes(tsp_params):
    insts = instgen.generate_many("tsp", 8, 10, 1)
    for mode in ("greedy", "dihedral8", "ortho:4", "sample:3"):
        a = evaluate.evaluate(tsp_params, insts, mode, seed=2)
        b = evaluate.evaluate(tsp_params, insts, mode, seed=2)
        assert a.costs == b.costs


def test_dihedral_mean_not_worse_than_greedy(tsp_params):
    insts = instgen.generate_many("tsp", 10, 64, 5)
    g = evaluate.evaluate(tsp_params, insts, "greedy")
    d = evaluate.evaluate(tsp_params, insts, "dihedral8")
    assert all(dc <= gc + 1e-12 for dc, gc in zip(d.costs, g.costs))


def test_worker_count(monkeypatch):
    monkeypatch.setenv("SNCO_PARALLELISM", "1")
    assert evaluate.worker_count() == 1
    monkeypatch.setenv("SNCO_PARALLELISM", "zero")
    with pytest.raises(ValueError):
        evaluate.worker_count()
    monkeypatch.delenv("SNCO_PARALLELISM")
    assert evaluate.worker_count() >= 1


def test_projection_cosine_bounds(tsp_params):
    c = evaluate.projection_cosine(tsp_params, instgen.generate_many("tsp", 8, 5, 0))
    assert -1.0 <= c <= 1.0
