import numpy as np
import pytest

from symnco import comdp, instgen, policy
from symnco.instgen import Task
from symnco.policy import ModelConfig
from symnco.tensor import Tape

TASKS = [t.value for t in Task]


def params_for(task, seed=0):
    return policy.init_params(ModelConfig(task=task), seed)


def test_init_is_deterministic_and_bounded():
    a, b = params_for("tsp"), params_for("tsp")
    assert a.equals(b)
    assert not a.equals(params_for("tsp", 1))
    w = a.tensors["enc0.wq"]
    assert np.abs(w).max() <= 1 / np.sqrt(16)
    assert np.array_equal(a.tensors["enc0.norm1.g"], np.ones(16))


def test_full_scale_dimensions():
    cfg = ModelConfig.full_scale("cvrp")
    shapes = policy.param_shapes(cfg)
    assert shapes["proj.w1"] == (128, 128) and shapes["proj.w2"] == (128, 128)
    assert shapes["init.w"] == (4, 128) and cfg.heads == 8


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(embed_dim=10, heads=4)
    with pytest.raises(ValueError):
        ModelConfig(task="knapsack")


@pytest.mark.parametrize("task", TASKS)
def test_sampled_rollouts_are_feasible_and_replayable(task):
    ps = params_for(task)
    insts = instgen.generate_many(task, 8, 6, 1)
    rng = np.random.Generator(np.random.Philox(2))
    br = policy.rollout_batch(ps, insts, 3, "sample", rng)
    assert br.rewards.shape == (6, 3)
    for r, seq in enumerate(br.sequences):
        inst = insts[r // 3]
        assert comdp.is_feasible(inst, seq)[0]
        assert br.rewards[r // 3, r % 3] == pytest.approx(comdp.reward(inst, seq), abs=1e-12)
        ll = policy.sequence_log_likelihood(ps, inst, seq).item()
        assert ll == pytest.approx(br.log_likelihood.data[r // 3, r % 3], abs=1e-10)
        assert ll == pytest.approx(sum(br.step_log_probs[r]), abs=1e-10)


@pytest.mark.parametrize("task", TASKS)
def test_greedy_is_deterministic(task):
    ps = params_for(task)
    inst = instgen.generate(task, 10, 3)
    a, b = policy.rollout(ps, inst), policy.rollout(ps, inst)
    assert a.solution.sequence == b.solution.sequence
    assert all(lp <= 0 for lp in a.step_log_probs)


@pytest.mark.parametrize("task", TASKS)
def test_decode_step_respects_mask(task):
    ps = params_for(task)
    inst = instgen.generate(task, 9, 4)
    enc = policy.encode(ps, inst)
    state = comdp.reset(inst)
    rng = np.random.Generator(np.random.Philox(0))
    while not state.done:
        lp = policy.decode_step(ps, enc, state, inst)
        legal = comdp.legal_actions(state, inst)
        p = np.exp(lp)
        assert p.sum() == pytest.approx(1.0, abs=1e-9)
        assert p[~legal].max(initial=0.0) < 1e-300
        state = comdp.step(state, int(rng.choice(np.flatnonzero(legal))), inst)


def test_forced_first_nodes_place_without_choosing():
    ps = params_for("tsp")
    inst = instgen.generate("tsp", 6, 0)
    br = policy.rollout_batch(ps, [inst], 6, "sample", np.random.default_rng(0), first_nodes=[range(6)])
    assert [s[0] for s in br.sequences] == list(range(6))
    assert all(len(lp) == 5 for lp in br.step_log_probs)


def test_replay_rejects_incomplete_sequences():
    ps = params_for("tsp")
    inst = instgen.generate("tsp", 5, 0)
    with pytest.raises(ValueError):
        policy.rollout_batch(ps, [inst], 1, "replay", forced=[[0, 1, 2]])


def test_task_mismatch_is_rejected():
    with pytest.raises(ValueError, match="parameters built for tsp"):
        policy.encode(params_for("tsp"), instgen.generate("op", 5, 0))


def test_encoder_is_permutation_equivariant():
    ps = params_for("tsp")
    inst = instgen.generate("tsp", 7, 1)
    perm = np.random.default_rng(0).permutation(7)
    a = policy.encode(ps, inst)
    b = policy.encode(ps, inst.replace_coords(inst.coords[perm]))
    assert np.allclose(a.node_embeddings.data[perm], b.node_embeddings.data, atol=1e-12)
    assert np.allclose(a.graph_embedding.data, b.graph_embedding.data, atol=1e-12)


def test_projection_head_shape():
    ps = params_for("tsp")
    enc = policy.encode_batch(ps, instgen.generate_many("tsp", 5, 3, 0), Tape())
    z = policy.project(ps, enc.graph_embedding)
    assert z.shape == (3, 16)


def test_checkpoint_round_trip_is_byte_stable(tmp_path):
    ps = params_for("pctsp", 5)
    extra = {"adam.m.init.w": np.full((5, 16), 0.25)}
    p1, p2 = tmp_path / "a.snck", tmp_path / "b.snck"
    policy.save_checkpoint(p1, ps, extra, {"step": 3})
    back, ex, meta = policy.load_checkpoint(p1)
    assert back.equals(ps) and meta == {"step": 3}
    assert np.array_equal(ex["adam.m.init.w"], extra["adam.m.init.w"])
    policy.save_checkpoint(p2, back, ex, meta)
    assert p1.read_bytes() == p2.read_bytes()
    p1.write_bytes(p1.read_bytes()[:-3])
    with pytest.raises(ValueError, match="truncated"):
        policy.load_checkpoint(p1)
