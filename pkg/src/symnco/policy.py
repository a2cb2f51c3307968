"""Attention encoder, masked autoregressive decoder and projection head.

Everything runs batched: ``B`` encoded instances, ``K`` rollouts per instance,
state rows ordered instance-major (row = b * K + k). The single-instance
functions wrap the batched ones with ``B = 1``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import comdp
from . import tensor as T
from .instgen import Instance, Task
from .tensor import Tape, Tensor

CHECKPOINT_MAGIC = b"SNCK"
CHECKPOINT_VERSION = 1

FEATURE_WIDTH = {Task.TSP: 2, Task.CVRP: 4, Task.PCTSP: 5, Task.OP: 4}


@dataclass
class ModelConfig:
    task: str = "tsp"
    embed_dim: int = 16
    heads: int = 2
    layers: int = 2
    ff_dim: int = 32
    clip: float = 10.0
    # "pooled" compares mean-pooled graph embeddings; "per_node" averages node-wise cosines
    invariance_target: str = "pooled"

    def __post_init__(self):
        Task.parse(self.task)
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.invariance_target not in ("pooled", "per_node"):
            raise ValueError(f"unknown invariance_target {self.invariance_target!r}")

    @property
    def task_enum(self) -> Task:
        return Task.parse(self.task)

    @property
    def feature_width(self) -> int:
        return FEATURE_WIDTH[self.task_enum]

    @classmethod
    def full_scale(cls, task: str = "tsp", layers: int = 6) -> "ModelConfig":
        return cls(task=task, embed_dim=128, heads=8, layers=layers, ff_dim=512)


@dataclass
class ParamSet:
    config: ModelConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def names(self) -> list[str]:
        return list(self.tensors)

    def copy(self) -> "ParamSet":
        return ParamSet(ModelConfig(**asdict(self.config)), {k: v.copy() for k, v in self.tensors.items()})

    def bind(self, tape: Tape) -> dict[str, Tensor]:
        return {name: tape.param(name, value) for name, value in self.tensors.items()}

    def equals(self, other: "ParamSet") -> bool:
        return (asdict(self.config) == asdict(other.config) and self.tensors.keys() == other.tensors.keys()
                and all(np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items()))


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.embed_dim, cfg.ff_dim
    shapes: dict[str, tuple[int, ...]] = {"init.w": (cfg.feature_width, d), "init.b": (d,)}
    for layer in range(cfg.layers):
        p = f"enc{layer}."
        shapes.update({
            p + "wq": (d, d), p + "wk": (d, d), p + "wv": (d, d), p + "wo": (d, d),
            p + "norm1.g": (d,), p + "norm1.b": (d,),
            p + "ff.w1": (d, f), p + "ff.b1": (f,), p + "ff.w2": (f, d), p + "ff.b2": (d,),
            p + "norm2.g": (d,), p + "norm2.b": (d,),
        })
    shapes.update({
        "dec.w_graph": (d, d), "dec.w_step": (2 * d + 1, d),
        "dec.first_placeholder": (d,), "dec.cur_placeholder": (d,),
        "dec.wk_glimpse": (d, d), "dec.wv_glimpse": (d, d), "dec.w_out": (d, d), "dec.wk_logit": (d, d),
        "proj.w1": (d, d), "proj.b1": (d,), "proj.w2": (d, d), "proj.b2": (d,),
    })
    return shapes


def init_params(cfg: ModelConfig, seed: int) -> ParamSet:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); norm gains start at 1 and biases of norms at 0."""
    rng = np.random.Generator(np.random.Philox(int(seed)))
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".g"):
            tensors[name] = np.ones(shape)
        elif ".norm" in name:
            tensors[name] = np.zeros(shape)
        else:
            fan_in = shape[0] if len(shape) == 2 else cfg.embed_dim
            bound = 1.0 / math.sqrt(fan_in)
            tensors[name] = rng.uniform(-bound, bound, size=shape)
    return ParamSet(cfg, tensors)


# ---------------------------------------------------------------- encoder


def node_features(instances: list[Instance]) -> np.ndarray:
    task = instances[0].task
    x = np.stack([i.coords for i in instances])
    if task is Task.TSP:
        return x
    extra = []
    for name in ("demand", "prize", "penalty"):
        if name in instances[0].features:
            extra.append(np.stack([i.features[name] for i in instances])[..., None])
    flag = np.zeros(x.shape[:2] + (1,))
    flag[:, instances[0].depot, 0] = 1.0
    return np.concatenate([x] + extra + [flag], axis=-1)


@dataclass
class Encoding:
    node_embeddings: Tensor  # (B, N, d) or (N, d)
    graph_embedding: Tensor  # (B, d) or (d,)


def _attention(P, h: Tensor, prefix: str, heads: int) -> Tensor:
    b, n, d = h.shape
    dh = d // heads

    def split(w):
        return T.permute(T.reshape(h @ P[prefix + w], (b, n, heads, dh)), (0, 2, 1, 3))

    q, k, v = split("wq"), split("wk"), split("wv")
    scores = T.scale(q @ T.permute(k, (0, 1, 3, 2)), 1.0 / math.sqrt(dh))
    out = T.softmax(scores) @ v
    out = T.reshape(T.permute(out, (0, 2, 1, 3)), (b, n, d))
    return out @ P[prefix + "wo"]


def _norm(P, x: Tensor, prefix: str) -> Tensor:
    return T.rmsnorm(x) * P[prefix + ".g"] + P[prefix + ".b"]


def _bind(params: ParamSet, tape: Tape | None) -> tuple[Tape, dict[str, Tensor]]:
    tape = tape if tape is not None else Tape(record=False)
    return tape, params.bind(tape)


def encode_batch(params: ParamSet, instances: list[Instance], tape: Tape | None = None) -> Encoding:
    cfg = params.config
    task = instances[0].task
    if task is not cfg.task_enum:
        raise ValueError(f"parameters built for {cfg.task}, got a {task.value} instance")
    feats = node_features(instances)
    if feats.shape[-1] != cfg.feature_width:
        raise ValueError(f"feature width {feats.shape[-1]} != {cfg.feature_width}")
    tape, P = _bind(params, tape)
    h = tape.const(feats) @ P["init.w"] + P["init.b"]
    for layer in range(cfg.layers):
        p = f"enc{layer}."
        h = _norm(P, h + _attention(P, h, p, cfg.heads), p + "norm1")
        ff = T.relu(h @ P[p + "ff.w1"] + P[p + "ff.b1"]) @ P[p + "ff.w2"] + P[p + "ff.b2"]
        h = _norm(P, h + ff, p + "norm2")
    return Encoding(h, T.mean(h, axis=-2))


def encode(params: ParamSet, instance: Instance, tape: Tape | None = None) -> Encoding:
    enc = encode_batch(params, [instance], tape)
    n, d = enc.node_embeddings.shape[1:]
    return Encoding(T.reshape(enc.node_embeddings, (n, d)), T.reshape(enc.graph_embedding, (d,)))


def project(params: ParamSet, graph_embedding: Tensor, tape: Tape | None = None) -> Tensor:
    """Two-layer ReLU projection head applied to the last axis."""
    if tape is None:
        tape = graph_embedding.tape if graph_embedding.tape is not None else Tape(record=False)
    P = params.bind(tape)
    hidden = T.relu(graph_embedding @ P["proj.w1"] + P["proj.b1"])
    return hidden @ P["proj.w2"] + P["proj.b2"]


# ---------------------------------------------------------------- decoder


@dataclass
class DecoderCache:
    node: Tensor  # (B, N, d)
    graph_ctx: Tensor  # (B, 1, d)
    glimpse_keys: Tensor  # (B, H, dh, N)
    glimpse_values: Tensor  # (B, H, N, dh)
    logit_keys: Tensor  # (B, d, N)


def precompute(params: ParamSet, enc: Encoding, P: dict[str, Tensor]) -> DecoderCache:
    node = enc.node_embeddings
    b, n, d = node.shape
    h = params.config.heads
    dh = d // h
    graph_ctx = T.reshape(enc.graph_embedding @ P["dec.w_graph"], (b, 1, d))
    gk = T.permute(T.reshape(node @ P["dec.wk_glimpse"], (b, n, h, dh)), (0, 2, 3, 1))
    gv = T.permute(T.reshape(node @ P["dec.wv_glimpse"], (b, n, h, dh)), (0, 2, 1, 3))
    lk = T.permute(node @ P["dec.wk_logit"], (0, 2, 1))
    return DecoderCache(node, graph_ctx, gk, gv, lk)


def dynamic_feature(batch: comdp.InstanceBatch, st: comdp.StateBatch) -> np.ndarray:
    task = batch.task
    if task is Task.CVRP:
        return st.remaining_capacity
    if task is Task.OP:
        return batch.max_length - st.length
    if task is Task.PCTSP:
        return np.maximum(batch.threshold - st.collected_prize, 0.0)
    return np.zeros(batch.size)


def _log_probs(params: ParamSet, P, cache: DecoderCache, batch: comdp.InstanceBatch,
               st: comdp.StateBatch, mask: np.ndarray, k: int) -> Tensor:
    """Masked log-probabilities, shape (B, K, N)."""
    cfg = params.config
    b, n, d = cache.node.shape
    h = cfg.heads
    dh = d // h
    cur = st.current.reshape(b, k)
    first = st.first.reshape(b, k)
    has_cur = (cur >= 0).astype(np.float64)[..., None]
    has_first = (first >= 0).astype(np.float64)[..., None]
    cur_emb = T.gather_rows(cache.node, np.maximum(cur, 0)) * has_cur + P["dec.cur_placeholder"] * (1.0 - has_cur)
    first_emb = (T.gather_rows(cache.node, np.maximum(first, 0)) * has_first
                 + P["dec.first_placeholder"] * (1.0 - has_first))
    dyn = dynamic_feature(batch, st).reshape(b, k, 1)
    step_in = T.concat([cur_emb, first_emb, dyn], axis=-1)
    q = step_in @ P["dec.w_step"] + cache.graph_ctx
    qh = T.permute(T.reshape(q, (b, k, h, dh)), (0, 2, 1, 3))
    illegal = ~mask.reshape(b, k, n)
    compat = T.scale(qh @ cache.glimpse_keys, 1.0 / math.sqrt(dh))
    compat = T.masked_fill(compat, illegal[:, None, :, :])
    glimpse = T.softmax(compat) @ cache.glimpse_values
    glimpse = T.reshape(T.permute(glimpse, (0, 2, 1, 3)), (b, k, d)) @ P["dec.w_out"]
    logits = T.scale(T.tanh(T.scale(glimpse @ cache.logit_keys, 1.0 / math.sqrt(d))), cfg.clip)
    return T.log_softmax(T.masked_fill(logits, illegal))


@dataclass
class BatchRollout:
    sequences: list[list[int]]  # B*K, instance-major
    rewards: np.ndarray  # (B, K)
    log_likelihood: Tensor  # (B, K)
    step_log_probs: list[list[float]]
    encoding: Encoding


def rollout_batch(params: ParamSet, instances: list[Instance], k: int, mode: str,
                  rng: np.random.Generator | None = None, first_nodes=None,
                  tape: Tape | None = None, forced: list[list[int]] | None = None,
                  encoding: Encoding | None = None) -> BatchRollout:
    """Decode ``k`` solutions for each instance.

    ``mode`` is "greedy" (argmax, lowest index on ties), "sample" or "replay"
    (teacher-force the sequences in ``forced``, one per row). For sampling,
    ``rng`` is one generator or a list with one generator per row.
    """
    if mode not in ("greedy", "sample", "replay"):
        raise ValueError(f"unknown decoding mode {mode!r}")
    if mode == "sample" and rng is None:
        raise ValueError("sampling needs an rng")
    per_row = isinstance(rng, (list, tuple))
    if per_row and len(rng) != len(instances) * k:
        raise ValueError(f"need one rng per row ({len(instances) * k}), got {len(rng)}")
    tape, P = _bind(params, tape)
    enc = encoding if encoding is not None else encode_batch(params, instances, tape)
    cache = precompute(params, enc, P)
    b = len(instances)
    m = b * k
    batch = comdp.InstanceBatch.from_instances(instances, repeat=k)
    if forced is not None:
        if len(forced) != m:
            raise ValueError(f"need {m} forced sequences, got {len(forced)}")
    fn = None if first_nodes is None else np.asarray(first_nodes, dtype=np.int64).reshape(m)
    st = comdp.reset_batch(batch, fn)
    loglik = None
    step_lp: list[list[float]] = [[] for _ in range(m)]
    while not st.done.all():
        mask = comdp.legal_mask(batch, st)
        active = ~st.done
        lp = _log_probs(params, P, cache, batch, st, mask, k)
        lpd = lp.data.reshape(m, -1)
        if mode == "greedy":
            act = np.argmax(lpd, axis=1)
        elif mode == "sample":
            u = np.array([g.random() for g in rng]) if per_row else rng.random(m)
            cdf = np.cumsum(np.exp(lpd), axis=1)
            act = np.argmax(cdf > (u * cdf[:, -1])[:, None], axis=1)
        else:
            pos = [len(seq) for seq in st.sequences]
            short = [r for r in np.flatnonzero(active) if pos[r] >= len(forced[r])]
            if short:
                raise ValueError(f"forced sequence {short[0]} ends before the episode does")
            act = np.array([forced[r][pos[r]] if active[r] else 0 for r in range(m)])
        act = np.where(active, act, 0)
        chosen = T.reshape(T.gather_rows(T.reshape(lp, (b, k, -1, 1)), act.reshape(b, k, 1)), (b, k))
        chosen = chosen * active.reshape(b, k).astype(np.float64)
        loglik = chosen if loglik is None else loglik + chosen
        for r in np.flatnonzero(active):
            step_lp[r].append(float(lpd[r, act[r]]))
        comdp.advance(batch, st, act)
    if loglik is None:
        loglik = tape.const(np.zeros((b, k)))
    if forced is not None:
        for r in range(m):
            if st.sequences[r] != list(forced[r]):
                raise ValueError(f"forced sequence {r} is not a complete solution")
    rewards = comdp.batch_rewards(batch, st).reshape(b, k)
    return BatchRollout(st.sequences, rewards, loglik, step_lp, enc)


@dataclass
class Rollout:
    solution: comdp.Solution
    log_likelihood: float
    step_log_probs: list[float]
    reward: float


def rollout(params: ParamSet, instance: Instance, mode: str = "greedy",
            rng: np.random.Generator | None = None, first_node: int | None = None) -> Rollout:
    fn = None if first_node is None else [first_node]
    br = rollout_batch(params, [instance], 1, mode, rng, fn)
    return Rollout(comdp.Solution(br.sequences[0], instance.task), float(br.log_likelihood.data[0, 0]),
                   br.step_log_probs[0], float(br.rewards[0, 0]))


def sequence_log_likelihood(params: ParamSet, instance: Instance, sequence,
                            tape: Tape | None = None, first_node_forced: bool = False) -> Tensor:
    """Log-likelihood of a recorded solution as a scalar tensor on ``tape``.

    With ``first_node_forced`` the first TSP node is placed, not chosen, and
    contributes nothing.
    """
    fn = [sequence[0]] if first_node_forced and not instance.task.has_depot else None
    br = rollout_batch(params, [instance], 1, "replay", first_nodes=fn, forced=[list(sequence)], tape=tape)
    return T.reshape(br.log_likelihood, ())


def decode_step(params: ParamSet, encoding: Encoding, state: comdp.DecodingState,
                instance: Instance) -> np.ndarray:
    """Log-probabilities over the N nodes for one non-terminal state."""
    mask = comdp.legal_actions(state, instance)
    if not mask.any():
        raise ValueError("no legal action in this state")
    tape, P = _bind(params, None)
    node = encoding.node_embeddings
    if node.ndim == 2:
        n, d = node.shape
        encoding = Encoding(T.reshape(node, (1, n, d)), T.reshape(encoding.graph_embedding, (1, d)))
    cache = precompute(params, encoding, P)
    batch = comdp.InstanceBatch.from_instances([instance])
    st = comdp._to_batch(state, instance.task)
    lp = _log_probs(params, P, cache, batch, st, mask[None, :], 1)
    return lp.data.reshape(-1)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, params: ParamSet, extra: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> None:
    """Manifest JSON followed by little-endian float64 blobs in manifest order."""
    arrays = list(params.tensors.items()) + list((extra or {}).items())
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "model": asdict(params.config),
        "params": [{"name": k, "shape": list(v.shape)} for k, v in params.tensors.items()],
        "extra": [{"name": k, "shape": list(np.shape(v))} for k, v in (extra or {}).items()],
        "meta": meta or {},
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for _, v in arrays)
    Path(path).write_bytes(CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(mbytes)) + mbytes + blob)


def load_checkpoint(path) -> tuple[ParamSet, dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, mlen = struct.unpack("<IQ", raw[4:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {version}, reader supports {CHECKPOINT_VERSION}")
    manifest = json.loads(raw[16:16 + mlen].decode("utf-8"))
    offset = 16 + mlen

    def read(entries):
        nonlocal offset
        out = {}
        for e in entries:
            shape = tuple(e["shape"])
            count = int(np.prod(shape)) if shape else 1
            if offset + 8 * count > len(raw):
                raise ValueError(f"{path}: truncated at {e['name']}")
            out[e["name"]] = np.frombuffer(raw, "<f8", count, offset).reshape(shape).astype(np.float64)
            offset += 8 * count
        return out

    tensors = read(manifest["params"])
    extra = read(manifest["extra"])
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    cfg = ModelConfig(**manifest["model"])
    expected = param_shapes(cfg)
    for name, shape in expected.items():
        if name not in tensors or tensors[name].shape != shape:
            raise ValueError(f"{path}: parameter {name} missing or mis-shaped")
    return ParamSet(cfg, tensors), extra, manifest["meta"]
