"""REINFORCE training loop: online instance generation, Adam, metrics CSV, checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import instgen, losses, policy
from .policy import ModelConfig, ParamSet
from .tensor import GradMap

log = logging.getLogger(__name__)

METRIC_FIELDS = ["step", "mean_cost", "best_cost", "loss_inv", "baseline", "seconds"]
EVAL_SEED = 2_147_483_647


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    task: str = "tsp"
    n: int = 10
    batch_size: int = 512
    steps: int = 2000
    lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    sym: losses.SymConfig = field(default_factory=lambda: losses.SymConfig(alpha=0.1, beta=0.0, K=1, L=10))
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0
    checkpoint_every: int = 500
    out_dir: str = "runs/default"
    eval_size: int = 256
    eval_seed: int = EVAL_SEED

    def validate(self) -> "TrainConfig":
        instgen.Task.parse(self.task)
        if self.model.task_enum is not instgen.Task.parse(self.task):
            raise ValueError(f"model task {self.model.task} != training task {self.task}")
        for name in ("n", "batch_size", "checkpoint_every", "eval_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.lr <= 0 or self.adam_eps <= 0 or self.weight_decay < 0:
            raise ValueError("lr and adam_eps must be positive, weight_decay non-negative")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        self.sym.validate()
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        sym = losses.SymConfig(**d.pop("sym", {}))
        model = ModelConfig(**d.pop("model", {"task": d.get("task", "tsp")}))
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(sym=sym, model=model, **d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class OptState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: ParamSet) -> "OptState":
        return cls({k: np.zeros_like(x) for k, x in params.tensors.items()},
                   {k: np.zeros_like(x) for k, x in params.tensors.items()}, 0)

    def to_extra(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": x for k, x in self.m.items()}
        out.update({f"adam.v.{k}": x for k, x in self.v.items()})
        return out

    @classmethod
    def from_extra(cls, extra: dict[str, np.ndarray], step: int) -> "OptState":
        m = {k[len("adam.m."):]: x for k, x in extra.items() if k.startswith("adam.m.")}
        v = {k[len("adam.v."):]: x for k, x in extra.items() if k.startswith("adam.v.")}
        return cls(m, v, step)


def adam_update(params: ParamSet, grads: GradMap, state: OptState, lr: float, beta1: float = 0.9,
                beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0) -> tuple[ParamSet, OptState]:
    """Bias-corrected Adam with decoupled weight decay; returns new objects."""
    for name, g in grads.items():
        if name not in params.tensors:
            raise KeyError(f"gradient for unknown parameter {name}")
        if g.shape != params.tensors[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape for {name}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {name}")
    t = state.step + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.tensors.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        new_p[name] = p - lr * update - lr * weight_decay * p
        new_m[name], new_v[name] = m, v
    return ParamSet(params.config, new_p), OptState(new_m, new_v, t)


def step_seeds(seed: int, step: int) -> tuple[int, np.random.Generator]:
    """Instance seed and sampling rng for one step; independent of any earlier step."""
    ss = np.random.SeedSequence([seed, step])
    inst_seed = int(ss.generate_state(1, np.uint64)[0])
    return inst_seed, np.random.Generator(np.random.Philox(ss.spawn(1)[0]))


@dataclass
class TrainResult:
    params: ParamSet
    opt_state: OptState
    metrics: list[dict]
    checkpoint: Path


def checkpoint_path(out_dir, step: int) -> Path:
    return Path(out_dir) / f"ckpt_{step:07d}.snck"


def save_training_checkpoint(path, params: ParamSet, opt: OptState, config: TrainConfig) -> None:
    meta = {"step": opt.step, "train_config": config.to_dict()}
    tmp = Path(str(path) + ".tmp")
    policy.save_checkpoint(tmp, params, opt.to_extra(), meta)
    tmp.replace(path)


def load_training_checkpoint(path) -> tuple[ParamSet, OptState, TrainConfig]:
    params, extra, meta = policy.load_checkpoint(path)
    opt = OptState.from_extra(extra, int(meta.get("step", 0)))
    if not opt.m:
        opt = OptState.zeros(params)
    cfg = TrainConfig.from_dict(meta["train_config"]) if "train_config" in meta else None
    return params, opt, cfg


def eval_instances(config: TrainConfig) -> list[instgen.Instance]:
    return instgen.generate_many(config.task, config.n, config.eval_size, config.eval_seed)


def train(config: TrainConfig, resume_from=None, write_files: bool = True) -> TrainResult:
    """Run (or continue) training; every step is a function of (seed, step) only."""
    cfg = config.validate()
    out = Path(cfg.out_dir)
    if resume_from is not None:
        params, opt, _ = load_training_checkpoint(resume_from)
        if params.config != cfg.model:
            raise ValueError("checkpoint model config differs from the training config")
    else:
        params = policy.init_params(cfg.model, cfg.seed)
        opt = OptState.zeros(params)
    metrics_path = out / "metrics.csv"
    if write_files:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        if resume_from is None or not metrics_path.exists():
            with metrics_path.open("w", newline="") as fh:
                csv.writer(fh).writerow(METRIC_FIELDS)
    last_good = checkpoint_path(out, opt.step)
    if write_files and resume_from is None:
        save_training_checkpoint(last_good, params, opt, cfg)

    rows = []
    for step in range(opt.step, cfg.steps):
        t0 = time.perf_counter()
        inst_seed, rng = step_seeds(cfg.seed, step)
        batch = instgen.generate_many(cfg.task, cfg.n, cfg.batch_size, inst_seed)
        est = losses.total_loss_batch(params, batch, cfg.sym, rng)
        m = est.metrics
        if not all(np.isfinite(m[k]) for k in ("mean_cost", "loss_inv", "baseline")):
            raise TrainingError(f"non-finite loss at step {step}; last good checkpoint {last_good}")
        try:
            params, opt = adam_update(params, est.grads, opt, cfg.lr, cfg.adam_beta1, cfg.adam_beta2,
                                      cfg.adam_eps, cfg.weight_decay)
        except FloatingPointError as exc:
            raise TrainingError(f"step {step}: {exc}; last good checkpoint {last_good}") from exc
        row = {"step": step + 1, "mean_cost": m["mean_cost"], "best_cost": m["best_cost"],
               "loss_inv": m["loss_inv"], "baseline": m["baseline"],
               "seconds": time.perf_counter() - t0}
        rows.append(row)
        if write_files:
            with metrics_path.open("a", newline="") as fh:
                csv.writer(fh).writerow([row[k] if k == "step" else repr(float(row[k])) for k in METRIC_FIELDS])
            if opt.step % cfg.checkpoint_every == 0:
                last_good = checkpoint_path(out, opt.step)
                save_training_checkpoint(last_good, params, opt, cfg)
        if (step + 1) % 100 == 0:
            log.info("step %d mean_cost %.4f loss_inv %.4f", step + 1, m["mean_cost"], m["loss_inv"])
    final = out / "final.snck"
    if write_files:
        save_training_checkpoint(final, params, opt, cfg)
    return TrainResult(params, opt, rows, final)
