import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from symnco import instgen, oracle
from symnco.instgen import DatasetError, Task, TSPLIBError

TASKS = list(Task)


@pytest.mark.parametrize("task", TASKS)
def test_generate_is_deterministic_and_valid(task):
    a = instgen.generate(task, 12, 7)
    b = instgen.generate(task, 12, 7)
    assert a.equals(b)
    a.validate()
    assert np.all((a.coords >= 0) & (a.coords < 1))
    assert not a.equals(instgen.generate(task, 12, 8))


def test_task_specific_ranges():
    cvrp = instgen.generate("cvrp", 21, 3)
    d = cvrp.features["demand"]
    assert d[0] == 0 and cvrp.depot == 0
    # 20 customers -> capacity 30, demands in {1..9}/30
    assert np.allclose(np.round(d[1:] * 30), d[1:] * 30) and d[1:].max() <= 9 / 30
    op = instgen.generate("op", 21, 3)
    assert op.globals["max_length"] == 2.0
    assert instgen.generate("op", 22, 3).globals["max_length"] == 4.0
    pc = instgen.generate("pctsp", 21, 3)
    assert pc.globals["prize_threshold"] == 1.0
    assert pc.features["prize"][1:].max() <= 4.0 / 20
    assert pc.features["penalty"][1:].max() <= 3.0 * 2.0 / 20


def test_generate_rejects_tiny_instances():
    with pytest.raises(ValueError):
        instgen.generate("cvrp", 2, 0)
    with pytest.raises(ValueError):
        instgen.generate("tsp", 1, 0)
    with pytest.raises(ValueError, match="unknown task"):
        instgen.generate("vrptw", 5, 0)


def test_validate_catches_bad_instances():
    inst = instgen.generate("cvrp", 6, 0)
    inst.features["demand"][0] = 0.5
    with pytest.raises(instgen.InstanceError, match="depot demand"):
        inst.validate()


@pytest.mark.parametrize("task", TASKS)
def test_dataset_round_trip_is_byte_stable(task, tmp_path):
    ds = instgen.make_dataset(task, 9, 5, 11)
    p1, p2 = tmp_path / "a.snd", tmp_path / "b.snd"
    instgen.save_dataset(ds, p1)
    back = instgen.load_dataset(p1)
    assert back.equals(ds)
    instgen.save_dataset(back, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_dataset_errors(tmp_path):
    ds = instgen.make_dataset("tsp", 5, 3, 0)
    path = tmp_path / "d.snd"
    instgen.save_dataset(ds, path)
    raw = path.read_bytes()
    (tmp_path / "magic").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(DatasetError, match="magic"):
        instgen.load_dataset(tmp_path / "magic")
    (tmp_path / "ver").write_bytes(raw[:4] + struct.pack("<I", 99) + raw[8:])
    with pytest.raises(DatasetError, match="version 99"):
        instgen.load_dataset(tmp_path / "ver")
    (tmp_path / "trunc").write_bytes(raw[:-8])
    with pytest.raises(DatasetError, match="truncated"):
        instgen.load_dataset(tmp_path / "trunc")
    (tmp_path / "tail").write_bytes(raw + b"\0")
    with pytest.raises(DatasetError, match="trailing"):
        instgen.load_dataset(tmp_path / "tail")
    mixed = instgen.Dataset(Task.TSP, 5, None, ds.instances + [instgen.generate("tsp", 6, 1)])
    with pytest.raises(DatasetError, match="mixed"):
        instgen.save_dataset(mixed, tmp_path / "m.snd")


SAMPLE = "\n".join([
    "NAME : sample5",
    "COMMENT : five points",
    "TYPE : TSP",
    "DIMENSION : 5",
    "EDGE_WEIGHT_TYPE : EUC_2D",
    "NODE_COORD_SECTION",
    "1 10 10",
    "2 30 10",
    "3 30 50",
    "4 10 50",
    "5 20 30",
    "EOF",
]) + "\n"


def test_tsplib_parse_rescale_and_write():
    inst = instgen.parse_tsplib(SAMPLE)
    assert inst.n == 5 and inst.task is Task.TSP
    assert inst.coords.min() == 0.0 and inst.coords.max() == 1.0
    assert inst.globals["scale"] == 40.0
    again = instgen.parse_tsplib(instgen.write_tsplib(inst, "sample5"))
    assert again.equals(inst)
    # rescaling multiplies every tour length by 1/span
    raw = inst.replace_coords(inst.coords * 40.0 + [10.0, 10.0])
    assert oracle.held_karp(inst).cost * 40.0 == pytest.approx(oracle.held_karp(raw).cost, abs=1e-9)


@pytest.mark.parametrize("text, msg", [
    (SAMPLE.replace("EUC_2D", "GEO"), "EDGE_WEIGHT_TYPE"),
    (SAMPLE.replace("DIMENSION : 5", "DIMENSION : 6"), "DIMENSION"),
    (SAMPLE.replace("3 30 50", "3 30"), "line 9"),
    (SAMPLE.replace("NODE_COORD_SECTION\n", ""), "line"),
])
def test_tsplib_errors(text, msg):
    with pytest.raises(TSPLIBError, match=msg):
        instgen.parse_tsplib(text)


@given(st.integers(0, 2**40), st.integers(2, 30))
def test_instance_seeds_are_distinct(seed, count):
    seeds = instgen.instance_seeds(seed, count)
    assert len(set(seeds)) == count
    assert seeds == instgen.instance_seeds(seed, count)
