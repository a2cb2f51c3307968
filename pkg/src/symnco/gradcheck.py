"""Finite-difference checks of every tensor op and of the model-level gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import instgen, losses, policy
from . import tensor as T
from .policy import ModelConfig, ParamSet
from .symmetry import sample_orthogonal, transform
from .tensor import Tape

REL_TOL = 1e-4
ABS_FLOOR = 1e-7
FD_EPS = 1e-5


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    components: int
    passed: bool
    max_abs_error: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: max rel err {self.max_rel_error:.2e}, "
                f"max abs err {self.max_abs_error:.2e} over {self.components} components")


def _away_from_zero(rng, shape, low=0.1):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(low, 1.0, size=shape)


def op_cases(rng: np.random.Generator) -> dict[str, tuple[list[np.ndarray], Callable]]:
    """name -> (inputs, fn); ``fn`` maps input tensors to an output tensor."""
    u = lambda *s: rng.normal(size=s)  # noqa: E731
    mask = rng.random((3, 5)) < 0.3
    idx = rng.integers(0, 4, size=(2, 6))
    return {
        "add": ([u(3, 4), u(4)], T.add),
        "sub": ([u(2, 3, 4), u(3, 1)], T.sub),
        "mul": ([u(3, 4), u(1, 4)], T.mul),
        "scale": ([u(5)], lambda x: T.scale(x, -1.7)),
        "relu": ([_away_from_zero(rng, (4, 3))], T.relu),
        "tanh": ([u(4, 3)], T.tanh),
        "exp": ([u(6)], T.exp),
        "log": ([rng.uniform(0.5, 2.0, size=(3, 4))], T.log),
        "sum": ([u(3, 4)], lambda x: T.sum(x, axis=0)),
        "sum_all": ([u(3, 4)], T.sum),
        "mean": ([u(2, 3, 4)], lambda x: T.mean(x, axis=-1)),
        "softmax": ([u(3, 5)], T.softmax),
        "log_softmax": ([u(3, 5)], T.log_softmax),
        "rmsnorm": ([u(3, 6)], T.rmsnorm),
        "cosine_similarity": ([u(3, 4), u(3, 4)], T.cosine_similarity),
        "matmul": ([u(3, 4), u(4, 2)], T.matmul),
        "matmul_batched": ([u(2, 3, 4), u(4, 5)], T.matmul),
        "matmul_vector": ([u(4), u(4, 3)], T.matmul),
        "reshape": ([u(2, 6)], lambda x: T.reshape(x, (3, 4))),
        "permute": ([u(2, 3, 4)], lambda x: T.permute(x, (2, 0, 1))),
        "concat": ([u(2, 3), u(2, 2)], lambda a, b: T.concat([a, b], axis=-1)),
        # masked outputs are zeroed: differencing around -1e9 is below float64 resolution
        "masked_fill": ([u(3, 5)], lambda x: T.masked_fill(T.log_softmax(T.masked_fill(x, mask)), mask, 0.0)),
        "gather_rows": ([u(2, 4, 3)], lambda x: T.gather_rows(x, idx)),
    }


def check_function(name: str, fn: Callable, inputs: list[np.ndarray], rng: np.random.Generator,
                   tol: float = REL_TOL, floor: float = ABS_FLOOR) -> CheckResult:
    """Compare backward() of ``sum(w * fn(inputs))`` with central differences."""
    tape = Tape()
    ts = [tape.param(f"x{i}", x) for i, x in enumerate(inputs)]
    out = fn(*ts)
    w = rng.normal(size=out.shape)
    grads = T.backward(tape, T.sum(out * w))
    worst, worst_abs, count = 0.0, 0.0, 0
    for i, x in enumerate(inputs):
        def f(xi, i=i):
            t2 = Tape(record=False)
            args = [t2.const(xi if j == i else inputs[j]) for j in range(len(inputs))]
            return float((fn(*args).data * w).sum())

        fd = T.finite_difference_grad(f, x, FD_EPS)
        worst = max(worst, T.max_relative_error(grads[f"x{i}"], fd, floor))
        worst_abs = max(worst_abs, float(np.abs(grads[f"x{i}"] - fd).max()))
        count += x.size
    return CheckResult(name, worst, count, worst <= tol, worst_abs)


def tiny_config(task: str = "tsp") -> ModelConfig:
    return ModelConfig(task=task, embed_dim=8, heads=2, layers=1, ff_dim=16)


def check_params(name: str, params: ParamSet, objective: Callable[[ParamSet, Tape], T.Tensor],
                 tol: float = REL_TOL, floor: float = ABS_FLOOR) -> CheckResult:
    """Compare backward() of a scalar objective with central differences over every parameter."""
    tape = Tape()
    grads = T.backward(tape, objective(params, tape))
    worst, worst_abs, count = 0.0, 0.0, 0
    for pname, value in params.tensors.items():
        def f(x, pname=pname):
            trial = ParamSet(params.config, dict(params.tensors))
            trial.tensors[pname] = x
            return objective(trial, Tape(record=False)).item()

        fd = T.finite_difference_grad(f, value, FD_EPS)
        worst = max(worst, T.max_relative_error(grads[pname], fd, floor))
        worst_abs = max(worst_abs, float(np.abs(grads[pname] - fd).max()))
        count += value.size
    return CheckResult(name, worst, count, worst <= tol, worst_abs)


def model_checks(seed: int, n: int = 6) -> list[CheckResult]:
    rng = np.random.Generator(np.random.Philox(seed))
    results = []
    for task in instgen.Task:
        params = policy.init_params(tiny_config(task.value), seed)
        inst = instgen.generate(task, n, seed)
        seq = policy.rollout(params, inst, "sample", rng).solution.sequence

        def loglik(ps, tape, inst=inst, seq=seq):
            return policy.sequence_log_likelihood(ps, inst, seq, tape)

        results.append(check_params(f"rollout_log_likelihood[{task.value}]", params, loglik))

    params = policy.init_params(tiny_config("tsp"), seed)
    inst = instgen.generate("tsp", n, seed + 1)
    q = sample_orthogonal(rng)
    image = transform(inst, q)

    def inv(ps, tape):
        enc = policy.encode_batch(ps, [inst, image], tape)
        a = losses._select_copy(enc, 1, 2, 0)
        b = losses._select_copy(enc, 1, 2, 1)
        return T.reshape(losses.invariance_value(ps, a, b, tape), ())

    results.append(check_params("invariance_loss", params, inv))

    # frozen-trajectory surrogates: sample once, then differentiate sum(w * loglik)
    for label, L, K, beta in (("surrogate_ss", 1, 3, 1.0), ("surrogate_ps", 2, 3, 0.0)):
        grp = losses.sample_group(params, [inst], L, K, rng, Tape(record=False))
        if label == "surrogate_ss":
            adv, _ = losses.centered(grp.rewards[:, 0, :])
            w = -adv / K
        else:
            w = losses.reinforce_weights(grp.rewards, beta)[0]
        seqs = grp.rollouts.sequences

        def surrogate(ps, tape, grp=grp, w=w, seqs=seqs, k=K):
            br = policy.rollout_batch(ps, grp.transformed, k, "replay", forced=seqs, tape=tape)
            return T.sum(br.log_likelihood * np.asarray(w).reshape(len(grp.transformed), k))

        results.append(check_params(label, params, surrogate))
    return results


def run_suite(seed: int = 0) -> list[CheckResult]:
    rng = np.random.Generator(np.random.Philox(seed))
    results = [check_function(name, fn, inputs, rng) for name, (inputs, fn) in op_cases(rng).items()]
    return results + model_checks(seed)
