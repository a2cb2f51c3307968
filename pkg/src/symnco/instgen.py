"""Problem instances: random generation, TSPLIB EUC_2D ingestion and dataset files."""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
MAGIC = b"SNCO"


class Task(str, Enum):
    TSP = "tsp"
    CVRP = "cvrp"
    PCTSP = "pctsp"
    OP = "op"

    @classmethod
    def parse(cls, value) -> "Task":
        if isinstance(value, Task):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown task {value!r}; expected one of tsp, cvrp, pctsp, op") from None

    @property
    def has_depot(self) -> bool:
        return self is not Task.TSP

    @property
    def maximize(self) -> bool:
        return self is Task.OP


FEATURE_NAMES = {
    Task.TSP: (),
    Task.CVRP: ("demand",),
    Task.PCTSP: ("prize", "penalty"),
    Task.OP: ("prize",),
}


class InstanceError(ValueError):
    pass


@dataclass(eq=False)
class Instance:
    """Node coordinates plus per-node features for one routing problem.

    ``globals`` carries task scalars: ``capacity`` (CVRP), ``prize_threshold``
    (PCTSP), ``max_length`` (OP). TSPLIB imports also keep ``scale``,
    ``offset_x`` and ``offset_y`` so costs can be mapped back.
    """

    task: Task
    coords: np.ndarray
    features: dict[str, np.ndarray] = field(default_factory=dict)
    globals: dict[str, float] = field(default_factory=dict)
    depot: int | None = None

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    def replace_coords(self, coords: np.ndarray) -> "Instance":
        return Instance(self.task, np.asarray(coords, dtype=np.float64), dict(self.features),
                        dict(self.globals), self.depot)

    def equals(self, other: "Instance") -> bool:
        return (
            self.task == other.task
            and self.depot == other.depot
            and np.array_equal(self.coords, other.coords)
            and self.features.keys() == other.features.keys()
            and all(np.array_equal(v, other.features[k]) for k, v in self.features.items())
            and self.globals == other.globals
        )

    def validate(self) -> "Instance":
        c = self.coords
        if c.ndim != 2 or c.shape[1] != 2:
            raise InstanceError(f"coords must be N x 2, got {c.shape}")
        if self.n < 2:
            raise InstanceError("instance needs at least 2 nodes")
        if not np.all(np.isfinite(c)):
            raise InstanceError("coords must be finite")
        expected = FEATURE_NAMES[self.task]
        if tuple(sorted(self.features)) != tuple(sorted(expected)):
            raise InstanceError(f"{self.task.value}: features {sorted(self.features)} != {sorted(expected)}")
        for name, v in self.features.items():
            if v.shape != (self.n,):
                raise InstanceError(f"feature {name} has shape {v.shape}, expected ({self.n},)")
        if self.task.has_depot:
            if self.depot is None or not 0 <= self.depot < self.n:
                raise InstanceError(f"{self.task.value} needs a depot index")
        elif self.depot is not None:
            raise InstanceError("tsp has no depot")
        customers = np.arange(self.n) != (self.depot if self.depot is not None else -1)
        if self.task is Task.CVRP:
            d = self.features["demand"]
            if d[self.depot] != 0:
                raise InstanceError("depot demand must be 0")
            if np.any(d[customers] <= 0) or np.any(d[customers] > 1):
                raise InstanceError("customer demands must lie in (0, 1]")
            if self.globals.get("capacity") != 1.0:
                raise InstanceError("capacity must be normalized to 1")
        if self.task is Task.OP and not self.globals.get("max_length", 0) > 0:
            raise InstanceError("OP needs max_length > 0")
        if self.task is Task.PCTSP and not self.globals.get("prize_threshold", 0) > 0:
            raise InstanceError("PCTSP needs prize_threshold > 0")
        return self


@dataclass
class GenConfig:
    """Constants of the instance distribution. ``customers`` below is n - 1."""

    cvrp_capacity: tuple[tuple[int, float], ...] = ((10, 20.0), (20, 30.0), (50, 40.0))
    cvrp_capacity_large: float = 50.0
    cvrp_max_demand: int = 9
    pctsp_length_scale: tuple[tuple[int, float], ...] = ((20, 2.0), (50, 3.0))
    pctsp_length_scale_large: float = 4.0
    pctsp_prize_threshold: float = 1.0
    op_max_length_small: float = 2.0
    op_max_length_large: float = 4.0
    op_small_limit: int = 20

    def cvrp_capacity_for(self, customers: int) -> float:
        for limit, cap in self.cvrp_capacity:
            if customers <= limit:
                return cap
        return self.cvrp_capacity_large

    def pctsp_scale_for(self, customers: int) -> float:
        for limit, k in self.pctsp_length_scale:
            if customers <= limit:
                return k
        return self.pctsp_length_scale_large


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based Philox generator; the documented PRNG for every seeded draw."""
    return np.random.Generator(np.random.Philox(int(seed) % (1 << 64)))


def generate(task, n: int, seed: int, config: GenConfig | None = None) -> Instance:
    task = Task.parse(task)
    cfg = config or GenConfig()
    if n < 2 or (task.has_depot and n < 3):
        raise InstanceError(f"{task.value} needs n >= {3 if task.has_depot else 2}, got {n}")
    rng = make_rng(seed)
    coords = rng.random((n, 2))
    m = n - 1
    if task is Task.TSP:
        return Instance(task, coords)
    if task is Task.CVRP:
        cap = cfg.cvrp_capacity_for(m)
        demand = np.zeros(n)
        demand[1:] = rng.integers(1, cfg.cvrp_max_demand + 1, size=m) / cap
        return Instance(task, coords, {"demand": demand}, {"capacity": 1.0}, 0)
    if task is Task.PCTSP:
        k = cfg.pctsp_scale_for(m)
        prize = np.zeros(n)
        penalty = np.zeros(n)
        prize[1:] = rng.random(m) * 4.0 / m
        penalty[1:] = rng.random(m) * 3.0 * k / m
        return Instance(task, coords, {"prize": prize, "penalty": penalty},
                        {"prize_threshold": cfg.pctsp_prize_threshold}, 0)
    prize = np.zeros(n)
    prize[1:] = rng.random(m)
    tmax = cfg.op_max_length_small if m <= cfg.op_small_limit else cfg.op_max_length_large
    return Instance(task, coords, {"prize": prize}, {"max_length": tmax}, 0)


def instance_seeds(seed: int, count: int) -> list[int]:
    """Deterministic per-instance seeds split off a dataset seed."""
    state = np.random.SeedSequence(int(seed)).generate_state(count, dtype=np.uint64)
    return [int(s) for s in state]


def generate_many(task, n: int, count: int, seed: int, config: GenConfig | None = None) -> list[Instance]:
    return [generate(task, n, s, config) for s in instance_seeds(seed, count)]


# ---------------------------------------------------------------- TSPLIB


class TSPLIBError(ValueError):
    pass


def parse_tsplib(text: str) -> Instance:
    """Read a EUC_2D TSPLIB file and rescale its coordinates into the unit square."""
    header: dict[str, str] = {}
    rows: dict[int, tuple[float, float]] = {}
    in_coords = False
    saw_section = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line == "EOF":
            break
        if line.startswith("NODE_COORD_SECTION"):
            in_coords = saw_section = True
            continue
        if in_coords:
            parts = line.split()
            if len(parts) != 3:
                raise TSPLIBError(f"line {lineno}: malformed coordinate line {line!r}")
            try:
                idx, x, y = int(parts[0]), float(parts[1]), float(parts[2])
            except ValueError:
                raise TSPLIBError(f"line {lineno}: malformed coordinate line {line!r}") from None
            if idx in rows:
                raise TSPLIBError(f"line {lineno}: duplicate node {idx}")
            rows[idx] = (x, y)
            continue
        m = re.match(r"^([A-Z_]+)\s*:\s*(.*)$", line)
        if m is None:
            if re.match(r"^[A-Z_]+_SECTION$", line):
                raise TSPLIBError(f"line {lineno}: unsupported section {line}")
            raise TSPLIBError(f"line {lineno}: cannot parse {line!r}")
        header[m.group(1)] = m.group(2).strip()

    ewt = header.get("EDGE_WEIGHT_TYPE")
    if ewt != "EUC_2D":
        raise TSPLIBError(f"unsupported EDGE_WEIGHT_TYPE {ewt!r}; only EUC_2D is read")
    if "TYPE" in header and header["TYPE"] != "TSP":
        raise TSPLIBError(f"unsupported TYPE {header['TYPE']!r}")
    if not saw_section:
        raise TSPLIBError("missing NODE_COORD_SECTION")
    if "DIMENSION" in header and int(header["DIMENSION"]) != len(rows):
        raise TSPLIBError(f"DIMENSION {header['DIMENSION']} but {len(rows)} coordinates")
    if len(rows) < 2:
        raise TSPLIBError("need at least 2 nodes")
    raw_xy = np.array([rows[k] for k in sorted(rows)], dtype=np.float64)
    lo = raw_xy.min(axis=0)
    span = float((raw_xy.max(axis=0) - lo).max())
    if span <= 0:
        raise TSPLIBError("all nodes coincide")
    coords = (raw_xy - lo) / span
    g = {"scale": span, "offset_x": float(lo[0]), "offset_y": float(lo[1])}
    return Instance(Task.TSP, coords, {}, g, None)


def write_tsplib(instance: Instance, name: str = "instance") -> str:
    """Render a TSP instance as EUC_2D text, undoing any stored rescale."""
    if instance.task is not Task.TSP:
        raise TSPLIBError("only TSP instances can be written as TSPLIB")
    s = instance.globals.get("scale", 1.0)
    off = np.array([instance.globals.get("offset_x", 0.0), instance.globals.get("offset_y", 0.0)])
    xy = instance.coords * s + off
    lines = [f"NAME : {name}", "TYPE : TSP", f"DIMENSION : {instance.n}",
             "EDGE_WEIGHT_TYPE : EUC_2D", "NODE_COORD_SECTION"]
    lines += [f"{i + 1} {x!r} {y!r}" for i, (x, y) in enumerate(xy.tolist())]
    lines.append("EOF")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- datasets


class DatasetError(ValueError):
    pass


@dataclass(eq=False)
class Dataset:
    task: Task
    n: int
    seed: int | None
    instances: list[Instance]
    version: int = FORMAT_VERSION

    @property
    def count(self) -> int:
        return len(self.instances)

    def equals(self, other: "Dataset") -> bool:
        return (self.task == other.task and self.n == other.n and self.seed == other.seed
                and self.count == other.count
                and all(a.equals(b) for a, b in zip(self.instances, other.instances)))


def make_dataset(task, n: int, count: int, seed: int, config: GenConfig | None = None) -> Dataset:
    task = Task.parse(task)
    return Dataset(task, n, seed, generate_many(task, n, count, seed, config))


def save_dataset(dataset: Dataset, path) -> None:
    insts = dataset.instances
    if not insts:
        raise DatasetError("refusing to save an empty dataset")
    for inst in insts:
        if inst.task != dataset.task or inst.n != dataset.n:
            raise DatasetError(
                f"mixed dataset: instance ({inst.task.value}, N={inst.n}) vs header "
                f"({dataset.task.value}, N={dataset.n})")
    first = insts[0]
    fnames = sorted(first.features)
    gnames = sorted(first.globals)
    for inst in insts:
        if sorted(inst.globals) != gnames or inst.depot != first.depot:
            raise DatasetError("instances disagree on globals or depot")
    blocks = [("coords", np.stack([i.coords for i in insts]))]
    blocks += [(f"feature:{k}", np.stack([i.features[k] for i in insts])) for k in fnames]
    blocks += [(f"global:{k}", np.array([i.globals[k] for i in insts], dtype=np.float64)) for k in gnames]
    header = {
        "format_version": FORMAT_VERSION,
        "task": dataset.task.value,
        "n": dataset.n,
        "count": dataset.count,
        "seed": dataset.seed,
        "depot": first.depot,
        "blocks": [{"name": name, "shape": list(arr.shape)} for name, arr in blocks],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for _, arr in blocks)
    Path(path).write_bytes(MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hbytes)) + hbytes + payload)


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise DatasetError(f"{path}: not a dataset file (bad magic or truncated header)")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != FORMAT_VERSION:
        raise DatasetError(f"{path}: format version {version}, this reader supports {FORMAT_VERSION}")
    if len(raw) < 16 + hlen:
        raise DatasetError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetError(f"{path}: corrupt header ({exc})") from None
    if header.get("format_version") != version:
        raise DatasetError(f"{path}: header version {header.get('format_version')} != {version}")
    offset = 16 + hlen
    arrays = {}
    for blk in header["blocks"]:
        shape = tuple(blk["shape"])
        nbytes = 8 * int(np.prod(shape))
        if offset + nbytes > len(raw):
            raise DatasetError(f"{path}: truncated data in block {blk['name']}")
        arrays[blk["name"]] = np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(raw):
        raise DatasetError(f"{path}: {len(raw) - offset} trailing bytes")
    task = Task.parse(header["task"])
    coords = arrays.pop("coords")
    feats = {k.split(":", 1)[1]: v for k, v in arrays.items() if k.startswith("feature:")}
    globs = {k.split(":", 1)[1]: v for k, v in arrays.items() if k.startswith("global:")}
    instances = [
        Instance(task, coords[i].copy(), {k: v[i].copy() for k, v in feats.items()},
                 {k: float(v[i]) for k, v in globs.items()}, header["depot"])
        for i in range(header["count"])
    ]
    return Dataset(task, header["n"], header["seed"], instances, version)
