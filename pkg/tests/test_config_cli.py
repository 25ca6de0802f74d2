import csv
import io
import json

import numpy as np
import pytest

from stochsens import cli
from stochsens.checks import FAIL, CheckResult
from stochsens.config import ConfigError, builtin_names, load_config, parse_config

SCALAR = {"problem": "lq", "grid": {"T": 1.0, "K": 200},
          "lq": {"x0": [1.0], "A": 0.0, "B": 1.0, "Q": 0.0, "N": 1.0, "M": 1.0},
          "perturbations": [{"label": "x0", "dx0": [1.0]}, {"label": "A", "dA": 1.0}]}


def _write(tmp_path, doc, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def _run(argv, capsys):
    code = cli.main(argv)
    out, err = capsys.readouterr()
    return code, out, err


# ------------------------------------------------------------------ config


@pytest.mark.parametrize("name", builtin_names())
def test_builtin_round_trip_is_idempotent(name):
    cfg = load_config(f"builtin:{name}")
    again = parse_config(json.loads(cfg.dumps()))
    assert again.dumps() == cfg.dumps()
    cfg.build()


def test_builtins_present():
    assert {"default", "lq_scalar", "mv_scalar", "mv_two_asset"} <= set(builtin_names())


@pytest.mark.parametrize("mutate,path", [
    (lambda d: d["grid"].update(K=0), "grid.K"),
    (lambda d: d["grid"].update(T=-1.0), "grid.T"),
    (lambda d: d["lq"].update(A="x"), "lq.A"),
    (lambda d: d["lq"].update(bogus=1), "lq"),
    (lambda d: d["lq"].pop("B"), "lq"),
    (lambda d: d["perturbations"][1].update(dZ=1.0), "perturbations[1]"),
    (lambda d: d["perturbations"].append({"label": "x0", "dA": 1.0}), "perturbations[2].label"),
    (lambda d: d["lq"].update(A=[0.0, 1.0, 2.0]), "lq.A"),
    (lambda d: d["lq"].update(N=0.0), "lq.N"),
    (lambda d: d.update(ensemble={"seed": -1}), "ensemble.seed"),
])
def test_invalid_fields_are_located(mutate, path):
    doc = json.loads(json.dumps(SCALAR))
    mutate(doc)
    with pytest.raises(ConfigError) as exc:
        parse_config(doc)
    assert exc.value.path == path


def test_array_time_functions_need_length_k_or_one():
    doc = json.loads(json.dumps(SCALAR))
    doc["lq"]["A"] = [0.5]
    assert np.allclose(parse_config(doc).lq_spec().A(0.3), 0.5)
    doc["lq"]["A"] = list(np.linspace(0, 1, 200))
    spec = parse_config(doc).lq_spec()
    assert spec.A(0.999)[0, 0] == pytest.approx(1.0)
    doc["lq"]["A"] = [0.0] * 7
    with pytest.raises(ConfigError, match="length K=200 or 1"):
        parse_config(doc)


def test_object_time_function_forms():
    doc = json.loads(json.dumps(SCALAR))
    doc["lq"]["A"] = {"constant": [[0.25]]}
    doc["lq"]["e"] = {"samples": [[0.0]] * 200}
    spec = parse_config(doc).lq_spec()
    assert spec.A(0.5)[0, 0] == 0.25


def test_overrides_revalidate():
    cfg = parse_config(json.loads(json.dumps(SCALAR)))
    o = cfg.with_overrides(seed=7, paths=11, steps=50, fmt="json")
    assert (o.seed, o.n_paths, o.grid.steps, o.output["format"]) == (7, 11, 50, "json")
    doc = json.loads(json.dumps(SCALAR))
    doc["lq"]["A"] = [0.0] * 200
    with pytest.raises(ConfigError):
        parse_config(doc).with_overrides(steps=50)


def test_defaults_applied():
    cfg = parse_config(json.loads(json.dumps(SCALAR)))
    assert cfg.n_paths == 10000 and cfg.seed == 0 and cfg.method == "exact"
    assert cfg.output["timing"] is False and cfg.fd["richardson"] is True


# --------------------------------------------------------------------- cli


def test_sens_csv_contract(tmp_path, capsys):
    path = _write(tmp_path, SCALAR)
    code, out, _ = _run(["sens", "--config", path], capsys)
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "label,adjoint_value,fd_value,abs_gap,rel_gap,mc_stderr,runtime_ms"
    rows = list(csv.DictReader(io.StringIO(out)))
    assert [r["label"] for r in rows] == ["x0", "A"]
    assert float(rows[0]["adjoint_value"]) == pytest.approx(0.5, abs=1e-10)
    assert float(rows[1]["adjoint_value"]) == pytest.approx(0.375, abs=1e-10)
    for r in rows:
        v = r["adjoint_value"]
        assert float(format(float(v), ".17g")) == float(v) and v == format(float(v), ".17g")
        assert r["runtime_ms"] == ""


def test_sens_output_is_byte_identical(tmp_path, capsys):
    path = _write(tmp_path, SCALAR)
    outs = [tmp_path / "a.csv", tmp_path / "b.csv"]
    for o in outs:
        assert _run(["sens", "--config", path, "--out", str(o)], capsys)[0] == 0
    assert outs[0].read_bytes() == outs[1].read_bytes()
    assert sorted(p.name for p in tmp_path.iterdir()) == ["a.csv", "b.csv", "cfg.json"]


def test_sens_mc_route_is_seed_deterministic(tmp_path, capsys):
    doc = dict(SCALAR, sensitivity={"method": "mc"}, ensemble={"n_paths": 500, "seed": 3})
    doc["lq"] = dict(SCALAR["lq"], C=[0.3])
    path = _write(tmp_path, doc)
    a = _run(["sens", "--config", path], capsys)[1]
    b = _run(["sens", "--config", path], capsys)[1]
    c = _run(["sens", "--config", path, "--seed", "4"], capsys)[1]
    assert a == b and a != c
    assert all(r["mc_stderr"] != "" for r in csv.DictReader(io.StringIO(a)))


def test_sens_timing_column_when_enabled(tmp_path, capsys):
    path = _write(tmp_path, dict(SCALAR, output={"timing": True}))
    rows = list(csv.DictReader(io.StringIO(_run(["sens", "--config", path], capsys)[1])))
    assert all(float(r["runtime_ms"]) > 0 for r in rows)


def test_sens_json_format(tmp_path, capsys):
    path = _write(tmp_path, SCALAR)
    code, out, _ = _run(["sens", "--config", path, "--format", "json"], capsys)
    rows = json.loads(out)
    assert code == 0 and rows[0]["label"] == "x0" and rows[0]["runtime_ms"] is None


def test_sens_mv_builtin(capsys):
    code, out, _ = _run(["sens", "--config", "builtin:mv_scalar", "--steps", "200"], capsys)
    rows = {r["label"]: r for r in csv.DictReader(io.StringIO(out))}
    assert code == 0 and len(rows) == 5
    assert float(rows["D_x"]["adjoint_value"]) == pytest.approx(-7.041623328376, rel=1e-10)
    assert all(float(r["rel_gap"]) < 1e-5 for r in rows.values())


def test_solve_commands(capsys):
    code, out, _ = _run(["solve-lq", "--config", "builtin:lq_scalar", "--paths", "200"], capsys)
    rec = json.loads(out)
    assert code == 0 and rec["value"] == pytest.approx(0.25, abs=1e-8)
    code, out, _ = _run(["solve-mv", "--config", "builtin:mv_scalar", "--paths", "2000", "--steps", "100"], capsys)
    rec = json.loads(out)
    assert code == 0 and rec["lambda_E"] == pytest.approx(-7.041623328376, rel=1e-10)
    code, out, _ = _run(["solve-lq", "--config", "builtin:lq_scalar", "--paths", "50", "--format", "csv"], capsys)
    assert out.startswith("key,value\n") and "\nvalue," in out


def test_check_default_passes(capsys):
    code, out, _ = _run(["check", "--config", "builtin:default", "--paths", "4000", "--steps", "200"], capsys)
    rep = json.loads(out)
    assert code == 0 and rep["passed"], rep["failures"]
    assert {c["name"] for c in rep["checks"]} >= {"isometry", "duality_residual", "picard_vs_riccati"}


def test_check_on_coarse_grid_skips(tmp_path, capsys):
    path = _write(tmp_path, dict(SCALAR, ensemble={"n_paths": 500}))
    code, out, _ = _run(["check", "--config", path, "--steps", "1"], capsys)
    rep = json.loads(out)
    assert code == 0
    assert any(c["status"] == "skip" for c in rep["checks"])


def test_failed_check_exits_one(capsys, monkeypatch):
    monkeypatch.setattr(cli, "run_suite", lambda cfg: [CheckResult("forced", FAIL, "")])
    code, _, err = _run(["check", "--config", "builtin:lq_scalar"], capsys)
    assert code == 1 and "forced" in err


@pytest.mark.parametrize("argv", [
    ["sens"],
    ["sens", "--config", "/nonexistent.json"],
    ["sens", "--config", "builtin:nope"],
    ["solve-mv", "--config", "builtin:lq_scalar"],
    ["sens", "--config", "builtin:lq_scalar", "--seed", "-1"],
    ["sens", "--config", "builtin:lq_scalar", "--steps", "0"],
    ["frobnicate"],
])
def test_config_errors_exit_two(argv, capsys):
    assert cli.main(argv) == 2


def test_schema_violation_exits_two(tmp_path, capsys):
    doc = json.loads(json.dumps(SCALAR))
    doc["lq"]["N"] = 0.0
    code, _, err = _run(["solve-lq", "--config", _write(tmp_path, doc)], capsys)
    assert code == 2 and "lq.N" in err
    code, _, err = _run(["sens", "--config", _write(tmp_path, dict(SCALAR, perturbations=[]))], capsys)
    assert code == 2


def test_degenerate_problem_exits_three(tmp_path, capsys):
    doc = {"problem": "mv", "grid": {"T": 1.0, "K": 50},
           "mv": {"x": 0.0, "A": 1.0, "mu": 0.0, "sigma": 0.2}, "perturbations": [{"label": "a", "dA": 1.0}]}
    code, _, err = _run(["sens", "--config", _write(tmp_path, doc)], capsys)
    assert code == 3 and "error[" in err


def test_invalid_json_exits_two(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    code, _, err = _run(["sens", "--config", str(p)], capsys)
    assert code == 2 and "--config" in err
