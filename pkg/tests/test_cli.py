import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from fracelastic import expcli
from fracelastic.fileio import (atomic_write_bytes, read_array, read_csv, read_json,
                                sha256_file, sidecar_path, write_array, write_csv)
from fracelastic.scenario import ConfigError, Scenario, default_scenario

SCEN = Path(__file__).resolve().parent.parent / "demos" / "scenarios"


def run(args):
    r = CliRunner().invoke(expcli.main, args, catch_exceptions=False)
    return r.exit_code, r.output


def write_scenario(tmp_path, doc, name="sc.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


# file formats

def test_array_roundtrip_and_sidecar(tmp_path):
    a = np.random.default_rng(0).standard_normal((8, 2, 2))
    write_array(tmp_path / "a.f64", a, {"grid": {"dimension": 1}, "note": "x"})
    b, side = read_array(tmp_path / "a.f64")
    assert np.array_equal(a, b)
    assert side["shape"] == [8, 2, 2] and side["dtype"] == "<f8" and side["rank"] == 2
    assert (tmp_path / "a.f64").stat().st_size == a.size * 8
    assert np.array_equal(np.fromfile(tmp_path / "a.f64", "<f8"), a.ravel())


def test_csv_roundtrip_is_exact(tmp_path):
    rows = [(1, 0.1 + 0.2, 1e-300), (2, np.float64(np.pi), -0.0)]
    write_csv(tmp_path / "t.csv", ["k", "x", "y"], rows, {"unit": "none"})
    back = read_csv(tmp_path / "t.csv")
    assert float(back[0]["x"]) == 0.1 + 0.2 and float(back[1]["x"]) == np.pi
    side = read_json(sidecar_path(tmp_path / "t.csv"))
    assert side["columns"] == ["k", "x", "y"] and side["rows"] == 2 and side["unit"] == "none"


def test_atomic_write_leaves_no_temporaries(tmp_path):
    atomic_write_bytes(tmp_path / "sub" / "f.bin", b"abc")
    atomic_write_bytes(tmp_path / "sub" / "f.bin", b"xyz")
    assert (tmp_path / "sub" / "f.bin").read_bytes() == b"xyz"
    assert [p.name for p in (tmp_path / "sub").iterdir()] == ["f.bin"]


# scenario validation

def test_default_scenarios_validate():
    for n in (1, 2):
        Scenario(default_scenario(n))
    for p in SCEN.glob("*.json"):
        Scenario.load(p)


@pytest.mark.parametrize("patch", [
    {"s": 1.0},
    {"pointsPerAxis": 15},
    {"dimension": 3},
    {"unknownKey": 1},
    {"lame": {"L0": 1.0, "M0": -1.0}},
    {"lame": {"L0": -5.0, "M0": 1.0}},
    {"regions": {"w1": {"kind": "box", "lo": [-0.5], "hi": [0.5]}}},
])
def test_bad_scenarios_raise_config_error(patch):
    doc = {**default_scenario(1), **patch}
    with pytest.raises(ConfigError):
        Scenario(doc)


def test_poisson_slaving_requires_consistent_L0():
    doc = default_scenario(1)
    doc["lame"] = {"L0": 1.0, "M0": 1.0, "nu": 0.25}
    with pytest.raises(ConfigError):
        Scenario(doc)


# exit codes

def test_verify_default_passes(tmp_path):
    doc = {**default_scenario(1), "verify": {"checks": ["tensor", "sqrt", "operators"]}}
    code, _ = run(["verify", "--scenario", write_scenario(tmp_path, doc), "--out", str(tmp_path / "o")])
    assert code == expcli.EXIT_OK
    rep = read_json(tmp_path / "o" / "report.json")
    assert all(c["passed"] for c in rep["checks"])
    man = read_json(tmp_path / "o" / "manifest.json")
    for key in ("command", "version", "inputHash", "scenarioHash", "seed", "timings", "outputs",
                "status", "exitCode"):
        assert key in man
    assert man["status"] == "ok" and man["exitCode"] == 0
    for name, digest in man["outputs"].items():
        assert sha256_file(tmp_path / "o" / name) == digest


def test_verify_fault_exits_one(tmp_path):
    code, _ = run(["verify", "--scenario", str(SCEN / "verify_fault.json"), "--out", str(tmp_path)])
    assert code == expcli.EXIT_VERIFY
    assert read_json(tmp_path / "manifest.json")["status"] == "verification_failed"


def test_verify_empty_exits_zero(tmp_path):
    code, _ = run(["verify", "--scenario", str(SCEN / "verify_empty.json"), "--out", str(tmp_path)])
    assert code == expcli.EXIT_OK


def test_bad_schema_exits_two(tmp_path):
    p = write_scenario(tmp_path, {**default_scenario(1), "s": 2.0})
    code, _ = run(["forward", "--scenario", p, "--out", str(tmp_path / "o")])
    assert code == expcli.EXIT_CONFIG


def test_unreadable_scenario_exits_two(tmp_path):
    (tmp_path / "x.json").write_text("{not json")
    code, _ = run(["forward", "--scenario", str(tmp_path / "x.json"), "--out", str(tmp_path / "o")])
    assert code == expcli.EXIT_CONFIG


def test_unconverged_solver_exits_three(tmp_path):
    doc = {**default_scenario(1), "pointsPerAxis": 128, "solver": {"rtol": 1e-30, "method": "cg"}}
    code, _ = run(["dnmap", "--scenario", write_scenario(tmp_path, doc), "--out", str(tmp_path / "o")])
    assert code == expcli.EXIT_NUMERIC
    man = read_json(tmp_path / "o" / "manifest.json")
    assert man["status"] == "numerical_failure" and "failedStage" in man


# determinism

def test_dnmap_is_byte_identical_across_runs_and_workers(tmp_path):
    sc = str(SCEN / "dnmap_constant.json")
    outs = []
    for k, w in enumerate(("1", "3", "1")):
        code, _ = run(["dnmap", "--scenario", sc, "--out", str(tmp_path / str(k)), "--workers", w])
        assert code == 0
        outs.append(read_json(tmp_path / str(k) / "manifest.json"))
    assert outs[0]["outputs"] == outs[1]["outputs"] == outs[2]["outputs"]
    assert outs[0]["inputHash"] == outs[2]["inputHash"]
    D, side = read_array(tmp_path / "0" / "dn.f64")
    assert D.shape == tuple(side["shape"]) and np.all(np.isfinite(D))


# commands

def test_forward_outputs(tmp_path):
    code, _ = run(["forward", "--scenario", str(SCEN / "forward_1d.json"), "--out", str(tmp_path)])
    assert code == 0
    u, side = read_array(tmp_path / "u.f64")
    assert side["grid"]["dimension"] == 1 and u.shape[-1] == 1


def test_reduce_sweep_decreases(tmp_path):
    code, _ = run(["reduce", "--out", str(tmp_path), "--strict", "--resolution-sweep", "256,512,1024"])
    assert code == 0
    res = [float(r["residual"]) for r in read_csv(tmp_path / "reduction.csv")]
    assert len(res) == 3 and res[0] > res[1] > res[2]


def test_bad_sweep_flag_is_usage_error(tmp_path):
    code, _ = run(["reduce", "--out", str(tmp_path), "--resolution-sweep", "a,b"])
    assert code == 2


def test_gauge1d_table(tmp_path):
    code, _ = run(["gauge1d", "--scenario", str(SCEN / "gauge1d.json"), "--out", str(tmp_path)])
    assert code == 0
    rows = read_csv(tmp_path / "gauge.csv")
    same = [float(r["distance"]) for r in rows if r["same_class"] == "1"]
    other = [float(r["distance"]) for r in rows if r["same_class"] == "0"]
    assert max(same) <= 1e-10 and min(other) >= 1e-3


@pytest.mark.slow
def test_invert_reaches_target(tmp_path):
    code, _ = run(["invert", "--scenario", str(SCEN / "invert_1d.json"), "--out", str(tmp_path),
                   "--strict"])
    assert code == 0
    summary = read_json(tmp_path / "invert.json")
    assert summary["relErrorM"] <= 0.1 and summary["relErrorL"] <= 0.1
