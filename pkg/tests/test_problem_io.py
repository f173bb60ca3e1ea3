import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from egat_routing.env import CVRP, TSP, Instance, check_solution, generate_cvrp, generate_tsp, opt_gap, tour_length
from egat_routing.model import EGATModel, ModelConfig
from egat_routing.problem_io import (
    MEAN_ROW, REFERENCE_OPTIMA, Checkpoint, CheckpointError, MetricsLog, ParseError,
    apply_checkpoint, checkpoint_bytes, load_checkpoint, load_dataset, make_row,
    normalize_instance, parse_cvrplib, parse_file, parse_tsplib, read_report, render_svg,
    route_edges, save_checkpoint, save_dataset, serialize_tsplib, write_report,
)

DATA = Path(__file__).parent / "data"

EIL51_OPT = [0, 21, 7, 25, 30, 27, 2, 35, 34, 19, 1, 28, 20, 15, 49, 33, 29, 8, 48, 9, 38, 32, 44,
             14, 43, 41, 18, 39, 40, 12, 24, 13, 23, 42, 6, 22, 47, 5, 26, 50, 45, 11, 46, 17, 3,
             16, 36, 4, 37, 10, 31]
BERLIN52_OPT = [0, 21, 30, 17, 2, 16, 20, 41, 6, 1, 29, 22, 19, 49, 28, 15, 45, 43, 33, 34, 35,
                38, 39, 36, 37, 47, 23, 4, 14, 5, 3, 24, 11, 27, 26, 25, 46, 12, 13, 51, 10, 50,
                32, 42, 9, 8, 7, 40, 18, 44, 31, 48]

SMALL_TSP = """NAME : tiny
TYPE : TSP
DIMENSION : 3
EDGE_WEIGHT_TYPE : EUC_2D
NODE_COORD_SECTION
1 0 0
2 3 0
3 3 4
EOF
"""


@pytest.mark.parametrize("name,tour", [("eil51", EIL51_OPT), ("berlin52", BERLIN52_OPT)])
def test_tsplib_fixture_optimal_tour(name, tour):
    inst = parse_file(DATA / f"{name}.tsp")
    assert inst.n_nodes == len(tour) and inst.name == name
    check_solution(inst, tour)
    assert tour_length(inst, tour, metric="tsplib") == REFERENCE_OPTIMA[name]
    assert opt_gap([tour_length(inst, tour, metric="tsplib")], [REFERENCE_OPTIMA[name]]) == 0


def test_cvrplib_fixture():
    inst = parse_file(DATA / "A-n32-k5.vrp")
    assert inst.kind == CVRP and inst.n_customers == 31
    assert inst.meta["raw_capacity"] == 100
    assert inst.capacity == 3.0
    assert inst.demands[0] == 0
    assert inst.demands.sum() == pytest.approx(12.3)
    assert REFERENCE_OPTIMA["A-n32-k5"] == 784


def test_parse_small_and_coordinates_kept():
    inst = parse_tsplib(SMALL_TSP)
    assert np.array_equal(inst.coords, [[0, 0], [3, 0], [3, 4]])
    assert tour_length(inst, [0, 1, 2]) == 12.0


@pytest.mark.parametrize("text", [
    SMALL_TSP.replace("EUC_2D", "GEO"),
    SMALL_TSP.replace("DIMENSION : 3", "DIMENSION : 4"),
    SMALL_TSP.replace("NODE_COORD_SECTION\n1 0 0\n2 3 0\n3 3 4\n", ""),
    SMALL_TSP.replace("2 3 0", "2 3 x"),
])
def test_malformed_tsplib(text):
    with pytest.raises(ParseError):
        parse_tsplib(text)


def test_cvrplib_rejects_multiple_depots():
    text = (DATA / "A-n32-k5.vrp").read_text().replace("DEPOT_SECTION\n 1\n", "DEPOT_SECTION\n 1\n 2\n")
    assert text != (DATA / "A-n32-k5.vrp").read_text()
    with pytest.raises(ParseError):
        parse_cvrplib(text)


def test_cvrplib_moves_depot_to_front():
    text = """NAME : d
TYPE : CVRP
DIMENSION : 3
EDGE_WEIGHT_TYPE : EUC_2D
CAPACITY : 10
NODE_COORD_SECTION
1 5 5
2 0 0
3 1 1
DEMAND_SECTION
1 4
2 0
3 6
DEPOT_SECTION
2
-1
EOF
"""
    inst = parse_cvrplib(text, capacity_scale=3.0)
    assert np.array_equal(inst.coords[0], [0, 0])
    assert np.allclose(inst.demands, [0, 1.2, 1.8])


@pytest.mark.parametrize("inst", [generate_tsp(12, seed=0), generate_cvrp(20, seed=0)])
def test_serialize_roundtrip(inst):
    text = serialize_tsplib(inst)
    back = parse_tsplib(text) if inst.kind == TSP else parse_cvrplib(text, capacity_scale=inst.capacity)
    assert np.allclose(back.coords, inst.coords, atol=1e-12)
    if inst.kind == CVRP:
        assert np.allclose(back.demands, inst.demands, atol=1e-12)


def test_gap_is_scale_invariant_under_normalisation():
    inst = parse_file(DATA / "eil51.tsp")
    norm, scale = normalize_instance(inst)
    assert norm.coords.min() >= 0 and norm.coords.max() == pytest.approx(1.0)
    other = list(range(51))
    g_raw = opt_gap([tour_length(inst, other)], [tour_length(inst, EIL51_OPT)])
    g_norm = opt_gap([tour_length(norm, other)], [tour_length(norm, EIL51_OPT)])
    assert g_raw == pytest.approx(g_norm, rel=1e-12)
    assert tour_length(norm, other) * scale == pytest.approx(tour_length(inst, other))


def test_dataset_roundtrip_and_determinism(tmp_path):
    insts = [generate_cvrp(20, seed=s) for s in range(4)]
    man = {"kind": CVRP, "size": 20, "seed": 0}
    save_dataset(tmp_path / "a.npz", insts, man)
    save_dataset(tmp_path / "b.npz", insts, man)
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
    back, m = load_dataset(tmp_path / "a.npz", CVRP, 20)
    assert back == insts and m == man
    with pytest.raises(ValueError):
        load_dataset(tmp_path / "a.npz", TSP)
    with pytest.raises(ValueError):
        load_dataset(tmp_path / "a.npz", CVRP, 50)
    # readable by plain numpy
    assert np.load(tmp_path / "a.npz")["coords"].shape == (4, 21, 2)


def small_model():
    return EGATModel(ModelConfig(TSP, 8, 4, 1, 2))


def test_checkpoint_roundtrip_bytes_stable(tmp_path):
    model = small_model()
    cp = Checkpoint.from_model(model, {"epoch": 3}, extra={"optim.step": torch.tensor([5])})
    save_checkpoint(cp, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt", model.cfg)
    assert back.metadata == {"epoch": 3}
    assert torch.equal(back.trainer_tensors()["optim.step"], torch.tensor([5]))
    assert checkpoint_bytes(back) == (tmp_path / "m.ckpt").read_bytes()
    clone = back.build_model()
    for k, v in model.state_dict().items():
        assert torch.equal(v, clone.state_dict()[k])


def test_checkpoint_corruption_detected(tmp_path):
    p = tmp_path / "m.ckpt"
    save_checkpoint(Checkpoint.from_model(small_model()), p)
    data = bytearray(p.read_bytes())
    data[len(data) // 2] ^= 0xFF
    p.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(p)
    p.write_bytes(bytes(data[:20]))
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
    p.write_bytes(b"not a checkpoint at all, just some text padding it out" * 2)
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_checkpoint(p)


def test_checkpoint_config_and_shape_mismatch(tmp_path):
    p = tmp_path / "m.ckpt"
    save_checkpoint(Checkpoint.from_model(small_model()), p)
    with pytest.raises(CheckpointError, match="config"):
        load_checkpoint(p, ModelConfig(TSP, 16, 4, 1, 2))
    cp = load_checkpoint(p)
    with pytest.raises(CheckpointError, match="shape"):
        apply_checkpoint(EGATModel(ModelConfig(TSP, 16, 4, 1, 2)), cp)
    with pytest.raises(CheckpointError, match="names"):
        apply_checkpoint(EGATModel(ModelConfig(TSP, 8, 4, 2, 2)), cp)


@pytest.mark.parametrize("fmt", ["csv", "json"])
def test_report_roundtrip(tmp_path, fmt):
    rows = [make_row("a", "nn", 11.0, 10.0, 0.5), make_row("b", "nn", 24.0, 20.0, 0.25),
            make_row("a", "x", 10.0, None)]
    p = tmp_path / f"r.{fmt}"
    full = write_report(rows, p, config_hash="abc")
    back = read_report(p)
    assert back == full
    mean = next(r for r in back if r["instance"] == MEAN_ROW and r["method"] == "nn")
    assert mean["gap"] == pytest.approx(0.15)
    assert next(r for r in back if r["instance"] == MEAN_ROW and r["method"] == "x")["gap"] is None
    if fmt == "csv":
        assert p.read_text().startswith("# config_hash=abc\n")


def test_report_rejects_empty_and_unknown(tmp_path):
    with pytest.raises(ValueError):
        write_report([], tmp_path / "r.csv")
    with pytest.raises(ValueError):
        write_report([make_row("a", "m", 1.0)], tmp_path / "r.xlsx")


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(1, 100), min_size=1, max_size=10))
def test_report_floats_survive_csv(tmp_path_factory, lengths):
    p = tmp_path_factory.mktemp("r") / "r.csv"
    rows = [make_row(str(i), "m", L, 1.0) for i, L in enumerate(lengths)]
    write_report(rows, p)
    back = read_report(p)
    assert [r["length"] for r in back[:-1]] == [float(L) for L in lengths]


def test_metrics_log(tmp_path):
    log = MetricsLog(tmp_path, "h")
    log.append({"epoch": 0, "gap": 0.5})
    log.append({"epoch": 1, "gap": 0.25})
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == "config_hash,epoch,gap" and len(lines) == 3
    assert len((tmp_path / "metrics.jsonl").read_text().splitlines()) == 2
    log.reset()
    assert not (tmp_path / "metrics.csv").exists()


def test_svg_tsp_edges():
    inst = generate_tsp(6, seed=0)
    root = ET.fromstring(render_svg(inst, [0, 1, 2, 3, 4, 5]))
    lines = [e for e in root.iter() if e.tag.endswith("line")]
    assert len(lines) == 6


def test_svg_cvrp_routes_and_depot(tmp_path):
    inst = Instance(CVRP, [[0, 0], [1, 0], [0, 1], [1, 1]], [0, 0.5, 0.5, 0.5], 1.0)
    seq = [1, 3, 0, 2]
    svg = render_svg(inst, seq, tmp_path / "r.svg")
    assert (tmp_path / "r.svg").read_text() == svg
    root = ET.fromstring(svg)
    classes = [e.get("class") for e in root.iter()]
    assert classes.count("depot") == 1
    assert sum(c == "edge route-0" for c in classes) == 3
    assert sum(c == "edge route-1" for c in classes) == 2
    assert [len(e) for _, e in route_edges(inst, seq, omit_depot=True)] == [1, 0]
