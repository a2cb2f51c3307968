import csv
import json

import numpy as np
import pytest

from symnco import policy, trainer
from symnco.losses import SymConfig
from symnco.policy import ModelConfig
from symnco.trainer import OptState, TrainConfig


def tiny(tmp_path, steps=6, **kw):
    return TrainConfig(task="tsp", n=6, batch_size=2, steps=steps, lr=1e-3,
                       sym=SymConfig(alpha=0.1, beta=1.0, K=2, L=2),
                       model=ModelConfig(task="tsp", embed_dim=8, heads=2, layers=1, ff_dim=16),
                       seed=3, checkpoint_every=2, out_dir=str(tmp_path), eval_size=4, **kw)


def test_adam_zero_gradient_keeps_params():
    ps = policy.init_params(ModelConfig(), 0)
    opt = OptState.zeros(ps)
    grads = {k: np.zeros_like(v) for k, v in ps.tensors.items()}
    new, st = trainer.adam_update(ps, grads, opt, lr=1e-3)
    assert new.equals(ps) and st.step == 1


def test_adam_first_step_by_hand():
    ps = policy.init_params(ModelConfig(), 0)
    g = {k: np.full_like(v, 0.3) for k, v in ps.tensors.items()}
    new, _ = trainer.adam_update(ps, g, OptState.zeros(ps), lr=1e-2, eps=1e-8)
    # t=1: m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    expect = ps.tensors["init.w"] - 1e-2 * 0.3 / (0.3 + 1e-8)
    assert np.allclose(new.tensors["init.w"], expect, rtol=0, atol=1e-15)


def test_adam_decoupled_weight_decay():
    ps = policy.init_params(ModelConfig(), 0)
    zero = {k: np.zeros_like(v) for k, v in ps.tensors.items()}
    new, _ = trainer.adam_update(ps, zero, OptState.zeros(ps), lr=0.1, weight_decay=0.5)
    assert np.allclose(new.tensors["init.w"], ps.tensors["init.w"] * 0.95, atol=1e-15)


def test_adam_rejects_non_finite_gradient():
    ps = policy.init_params(ModelConfig(), 0)
    g = {k: np.zeros_like(v) for k, v in ps.tensors.items()}
    g["dec.w_out"][0, 0] = np.nan
    with pytest.raises(FloatingPointError, match="dec.w_out"):
        trainer.adam_update(ps, g, OptState.zeros(ps), lr=1e-3)


def test_config_json_round_trip(tmp_path):
    cfg = tiny(tmp_path)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert TrainConfig.from_json(path) == cfg
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"task": "tsp", "bogus": 1})


def test_config_validation(tmp_path):
    with pytest.raises(ValueError):
        tiny(tmp_path, weight_decay=-1.0).validate()
    bad = tiny(tmp_path)
    bad.model = ModelConfig(task="op")
    with pytest.raises(ValueError, match="model task"):
        bad.validate()


def test_defaults_follow_published_recipe():
    cfg = TrainConfig()
    assert cfg.lr == 1e-4 and cfg.batch_size == 512
    assert (cfg.sym.alpha, cfg.sym.beta, cfg.sym.K, cfg.sym.L) == (0.1, 0.0, 1, 10)


def test_zero_steps_keeps_initialization(tmp_path):
    res = trainer.train(tiny(tmp_path, steps=0))
    loaded, opt, _ = trainer.load_training_checkpoint(res.checkpoint)
    assert loaded.equals(policy.init_params(res.params.config, 3)) and opt.step == 0


def test_training_writes_metrics_and_checkpoints(tmp_path):
    res = trainer.train(tiny(tmp_path))
    with open(tmp_path / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == trainer.METRIC_FIELDS
    assert [int(r["step"]) for r in rows] == list(range(1, 7))
    assert sorted(p.name for p in tmp_path.glob("ckpt_*.snck")) == [
        "ckpt_0000000.snck", "ckpt_0000002.snck", "ckpt_0000004.snck", "ckpt_0000006.snck"]
    for p in tmp_path.glob("*.snck"):
        ps, _, _ = trainer.load_training_checkpoint(p)
        assert all(np.all(np.isfinite(v)) for v in ps.tensors.values())
    assert res.opt_state.step == 6


def test_determinism_and_resume(tmp_path):
    a = trainer.train(tiny(tmp_path / "a"))
    b = trainer.train(tiny(tmp_path / "b"))
    assert a.params.equals(b.params)
    strip = [{k: v for k, v in r.items() if k != "seconds"} for r in a.metrics]
    assert strip == [{k: v for k, v in r.items() if k != "seconds"} for r in b.metrics]
    c = trainer.train(tiny(tmp_path / "c"), resume_from=tmp_path / "a" / "ckpt_0000004.snck")
    assert c.params.equals(a.params)
    assert all(np.array_equal(c.opt_state.m[k], a.opt_state.m[k]) for k in a.opt_state.m)


def test_hundred_steps_bit_identical():
    def run():
        cfg = TrainConfig(task="tsp", n=5, batch_size=1, steps=100, lr=1e-3,
                          sym=SymConfig(alpha=0.1, beta=1.0, K=2, L=2),
                          model=ModelConfig(task="tsp", embed_dim=4, heads=1, layers=1, ff_dim=4), seed=9)
        return trainer.train(cfg, write_files=False).params

    assert run().equals(run())


def test_non_finite_metrics_abort_with_last_good(tmp_path, monkeypatch):
    cfg = tiny(tmp_path, steps=4)
    real = trainer.losses.total_loss_batch
    calls = {"n": 0}

    def flaky(*args, **kw):
        est = real(*args, **kw)
        calls["n"] += 1
        if calls["n"] == 3:
            est.metrics["loss_inv"] = float("nan")
        return est

    monkeypatch.setattr(trainer.losses, "total_loss_batch", flaky)
    with pytest.raises(trainer.TrainingError, match="ckpt_0000002"):
        trainer.train(cfg)
    assert (tmp_path / "ckpt_0000002.snck").exists()
    assert not (tmp_path / "final.snck").exists()
