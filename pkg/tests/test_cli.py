import csv
import json
import subprocess
import sys

import numpy as np
import pytest
from click.testing import CliRunner

from ambientlab.cli import main
from ambientlab.conformal_lab import TorusSpec, functional_gradient_check
from ambientlab.metric_zoo import sphere_spec, torus_spec

TORUS_OMEGA = "0.3*sin(x1)*cos(x2) + 0.2*cos(x3 + 0.5)"


def run(*args):
    res = CliRunner().invoke(main, list(args))
    return res.exit_code, res.stdout, res.stderr


def test_sphere_volume_coefficients():
    code, out, _ = run("compute", "--metric", "sphere", "--dim", "5", "--point", "0,0,0,0,0", "--quantities", "vk:3")
    assert code == 0
    doc = json.loads(out)
    assert doc["schema"] == "ambientlab/1"
    assert np.allclose(doc["results"]["vk:3"], [2.5, 2.5, 1.25], rtol=1e-12)


def test_flat_obstruction_is_zero():
    code, out, _ = run("compute", "--metric", "flat", "--dim", "5", "--quantities", "omega:1,g_coeff:2")
    assert code == 0
    res = json.loads(out)["results"]
    assert np.abs(res["omega:1"]).max() == 0.0
    assert np.abs(res["g_coeff:2"]).max() == 0.0


def test_capability_error_from_spec_file(tmp_path):
    path = tmp_path / "s6.json"
    path.write_text(json.dumps(sphere_spec(6).to_document()))
    code, out, err = run("compute", "--metric", str(path), "--quantities", "vk:4")
    assert code == 3
    assert "k exceeds n/2" in json.loads(out)["error"]["reason"]
    assert len(err.strip().splitlines()) == 1


def test_even_dimension_omega_is_gated():
    code, _, err = run("compute", "--metric", "sphere", "--dim", "4", "--quantities", "omega:1")
    assert code == 3 and "capability" in err


def test_input_errors_exit_2(tmp_path):
    assert run("compute", "--metric", "nosuch", "--dim", "3")[0] == 2
    assert run("compute", "--metric", "sphere", "--dim", "3", "--point", "0,0")[0] == 2
    assert run("compute", "--metric", "sphere", "--dim", "3", "--quantities", "bogus:1")[0] == 2
    bad = tmp_path / "bad.json"
    bad.write_text('{"dimension": 1, "variables": ["x"], "components": [["sin(x"]]}')
    code, out, _ = run("compute", "--metric", str(bad))
    assert code == 2 and "column" in json.loads(out)["error"]["reason"]
    assert run("compute", "--metric", "sphere", "--dim", "5", "--order", "2", "--quantities", "vk:2")[0] == 2


def test_csv_output(tmp_path):
    out_path = tmp_path / "q.csv"
    code, out, _ = run("compute", "--metric", "random_jet", "--dim", "4", "--quantities", "obstruction,L:2",
                       "--format", "csv", "--out", str(out_path))
    assert code == 0
    rows = list(csv.reader(out_path.open()))
    assert rows[0] == ["quantity", "index", "value"]
    assert {r[0] for r in rows[1:]} == {"obstruction", "obstruction_trace_record", "L:2"}
    assert out.splitlines()[0] == "quantity,index,value"


def test_verify_conventions_and_failure_exit():
    code, out, _ = run("verify", "--suite", "conventions", "--seed", "42")
    doc = json.loads(out)
    assert code == 0 and doc["summary"]["failed"] == 0
    assert any(c["name"] == "conventions.g1_equals_2P" and c["passed"] for c in doc["checks"])
    code, out, _ = run("verify", "--suite", "conventions", "--tol", "conventions.g1_equals_2P=1e-30")
    assert code == 1
    assert json.loads(out)["summary"]["failures"] == ["conventions.g1_equals_2P"]


def test_verify_is_deterministic():
    a = json.loads(run("verify", "--suite", "curvature", "--seed", "7")[1])
    b = json.loads(run("verify", "--suite", "curvature", "--seed", "7")[1])
    for d in (a, b):
        d.pop("wall_time")
        for c in d["checks"]:
            c.pop("seconds")
    assert a == b


def test_unknown_suite_exit_2():
    code, _, err = run("verify", "--suite", "nosuch")
    assert code == 2 and "unknown suite" in err


def test_list_enumerates_everything():
    doc = json.loads(run("list")[1])
    assert "sphere_stereographic" in doc["builtins"]
    assert set(doc["suites"]) >= {"conventions", "torus"}
    assert sum(len(v) for v in doc["suites"].values()) >= 25
    assert "vk" in doc["quantities"]


def test_sweep_matches_functional_gradient_quadrature(tmp_path):
    out_path = tmp_path / "v1.csv"
    code, out, _ = run("sweep", "--metric", "torus_perturbed", "--dim", "3", "--omega", TORUS_OMEGA,
                       "--quantity", "vk:1", "--grid", "8", "--seed", "42", "--out", str(out_path))
    assert code == 0
    rows = list(csv.reader(out_path.open()))
    assert len(rows) == 1 + 512
    summary = json.loads(out)["summary"]
    rep = functional_gradient_check(TorusSpec(torus_spec(3, 42), TORUS_OMEGA, 8), 1)
    assert abs(summary["integral"] - rep.details["integral_vk"]) < 1e-6
    values = np.array([float(r[-1]) for r in rows[1:]])
    assert abs(summary["mean"] - values.mean()) < 1e-12


def test_sweep_flat_torus_is_zero(tmp_path):
    out_path = tmp_path / "flat.csv"
    assert run("sweep", "--metric", "flat", "--dim", "3", "--grid", "4", "--out", str(out_path))[0] == 0
    assert all(float(r[-1]) == 0.0 for r in list(csv.reader(out_path.open()))[1:])


def test_sweep_rejects_non_periodic_factor():
    code, out, _ = run("sweep", "--dim", "3", "--omega", "x1", "--grid", "4")
    assert code == 2
    assert "periodic" in json.loads(out)["error"]["reason"]


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "ambientlab.cli", "compute", "--metric", "sphere", "--dim", "6",
                           "--quantities", "vk:4"], capture_output=True, text=True)
    assert proc.returncode == 3
    assert "k exceeds n/2" in proc.stderr
