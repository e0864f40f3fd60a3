import csv
import json
import math

import pytest

from orbitshift import cli

X_CYCLE = {"system": {"id": "model_toroidal"}, "cycle": {"guess": [1.0, -0.2978], "m": 2}}


def run(tmp_path, command, config, *extra, name="cfg.json"):
    tmp_path.mkdir(parents=True, exist_ok=True)
    out = tmp_path / "out"
    args = [command, "--out", str(out)]
    if config is not None:
        path = tmp_path / name
        path.write_text(json.dumps(config))
        args += ["--config", str(path)]
    return cli.main(args + list(extra)), out


def read_csv(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# manifest_sha256=")
    return list(csv.reader(lines[1:]))


def test_trace_quarter_turn(tmp_path):
    cfg = {"system": {"id": "planar_rotation"},
           "trace": {"x0": [1.0, 0.0], "span": [0.0, math.pi / 2], "samples": 2}}
    code, out = run(tmp_path, "trace", cfg)
    assert code == 0
    header, *rows = read_csv(out / "trace.csv")
    assert header[:3] == ["t", "x0", "x1"]
    assert float(rows[-1][1]) == pytest.approx(0.0, abs=1e-8)
    assert float(rows[-1][2]) == pytest.approx(1.0, abs=1e-8)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["files"] == ["trace.csv"]


def test_unknown_key_is_named(tmp_path, capsys):
    cfg = {"system": {"id": "planar_rotation"}, "perturbtion": {},
           "trace": {"x0": [1, 0], "span": [0, 1]}}
    code, _ = run(tmp_path, "trace", cfg)
    err = json.loads(capsys.readouterr().out)["error"]
    assert code == 2 and "perturbtion" in err["message"]


@pytest.mark.parametrize("cfg", [
    {"system": {"id": "planar_rotation"}},
    {"system": {"id": "nope"}, "trace": {"x0": [1, 0], "span": [0, 1]}},
    {"system": {"id": "planar_rotation"}, "trace": {"x0": [1, 0], "span": [0, 1]},
     "integration": {"rtol": -1.0}},
])
def test_config_errors_exit_2(tmp_path, cfg, capsys):
    code, _ = run(tmp_path, "trace", cfg)
    assert code == 2
    assert json.loads(capsys.readouterr().out)["error"]["type"] == "ConfigError"


def test_missing_config_file(tmp_path, capsys):
    assert cli.main(["trace", "--config", str(tmp_path / "missing.json")]) == 2


def test_poincare_flags_lost_seed(tmp_path):
    cfg = {"system": {"id": "model_toroidal"},
           "poincare": {"seeds": [[1.0, 0.0], [-0.5, 0.0]], "turns": 5}}
    code, out = run(tmp_path, "poincare", cfg)
    assert code == 0
    seeds = json.loads((out / "poincare.json").read_text())["seeds"]
    assert seeds[0]["flag"] == "ok" and seeds[1]["flag"] != "ok"


def test_find_cycle_is_deterministic(tmp_path):
    code1, out1 = run(tmp_path / "a", "find-cycle", X_CYCLE)
    code2, out2 = run(tmp_path / "b", "find-cycle", X_CYCLE)
    assert code1 == code2 == 0
    for name in ("cycle.json", "ribbon.csv", "manifest.json"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()
    cyc = json.loads((out1 / "cycle.json").read_text())["cycle"]
    assert cyc["class"] == "X_cycle"
    assert cyc["sections"][0]["point"] == pytest.approx([0.91361733, -0.28248751], abs=1e-7)


def test_degenerate_cycle_exit_1(tmp_path, capsys):
    cfg = {"system": {"id": "model_toroidal", "params": {"island_amp": 0}},
           "cycle": {"guess": [1.29776, 0.0], "m": 2}}
    code, _ = run(tmp_path, "find-cycle", cfg)
    assert code == 1
    assert json.loads(capsys.readouterr().out)["error"]["type"] == "DegenerateCycleError"


def test_shift_with_verification(tmp_path):
    cfg = {**X_CYCLE, "perturbation": {"id": "resonant_mode",
                                       "k_list": [0.1, 0.03, 0.01, 0.003, 0.001]},
           "shift": {"verify": True}}
    code, out = run(tmp_path, "shift", cfg)
    assert code == 0
    payload = json.loads((out / "shift.json").read_text())
    assert payload["form"] == "section" and payload["verification"]["pass"]
    assert payload["verification"]["fitted_order"] == pytest.approx(2.0, abs=0.2)
    assert len(read_csv(out / "shift_residuals.csv")) == 6


def test_jacobian_shift_map(tmp_path):
    cfg = {"system": {"id": "standard_map"}, "perturbation": {"id": "standard_map_kick"},
           "cycle": {"guess": [0.01, 0.0], "m": 1}}
    code, out = run(tmp_path, "jacobian-shift", cfg)
    assert code == 0
    sec = json.loads((out / "jacobian_shift.json").read_text())["sections"][0]
    # the kick is constant and the Hessian of K sin x vanishes at x = 0, so dDP = 0
    assert sec["djac"] == pytest.approx([0.0, 0.0, 0.0, 0.0], abs=1e-12)


def test_list_fields(capsys):
    assert cli.main(["list-fields"]) == 0
    ids = {f["id"] for f in json.loads(capsys.readouterr().out)["fields"]}
    assert {"abc", "model_toroidal", "standard_map"} <= ids


def test_verify_subset(tmp_path):
    code, out = run(tmp_path, "verify", {"verify": {"criteria": [8]}})
    report = json.loads((out / "verify_report.json").read_text())
    assert code == 0 and report["pass"] and [c["criterion"] for c in report["criteria"]] == [8]
