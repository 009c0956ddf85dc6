import json
import subprocess
import sys

import numpy as np
import pytest

from kneessm.cli import EXIT_INVALID, EXIT_OK, EXIT_RUNTIME, main
from kneessm.mesh import is_watertight, load_mesh, save_mesh
from kneessm.pointset import load_pointset
from kneessm.synthetic import ellipsoid_family, ellipsoid_mesh, write_ellipsoid_cohort


@pytest.fixture(scope="module")
def volumes(tmp_path_factory):
    return write_ellipsoid_cohort(tmp_path_factory.mktemp("vols"), n_subjects=3, seed=2, spacing=1.0)


def _json_out(capsys):
    return json.loads(capsys.readouterr().out)


def test_help_and_bad_arguments():
    assert main(["--help"]) == EXIT_OK
    assert main([]) == EXIT_INVALID
    assert main(["ingest"]) == EXIT_INVALID
    assert main(["nosuch"]) == EXIT_INVALID


def test_run_requires_config():
    assert main(["run"]) == EXIT_INVALID


def test_run_with_invalid_config(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"register": {"lambda": -1}}))
    assert main(["run", "--config", str(tmp_path / "c.json")]) == EXIT_INVALID
    (tmp_path / "m.json").write_text(json.dumps({"inputs": {"subjects": [{"id": "a", "volume": "x.json"}]}}))
    assert main(["run", "--config", str(tmp_path / "m.json")]) == EXIT_INVALID


def test_run_stage_failure_is_runtime(tmp_path, volumes):
    cfg = {"inputs": {"subjects": volumes}, "output_dir": str(tmp_path / "out"),
           "stages": {"ingest": False, "condition": False, "metrics": False, "materials": False}}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert main(["run", "--config", str(tmp_path / "c.json")]) == EXIT_RUNTIME
    assert (tmp_path / "out" / "FAILED").exists()


def test_run_end_to_end(tmp_path, volumes, capsys):
    cfg = {"inputs": {"subjects": volumes}, "output_dir": "out", "condition": {"n_points": 150},
           "stages": {"metrics": False, "materials": False}}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert main(["run", "--config", str(tmp_path / "c.json"), "--seed", "3"]) == EXIT_OK
    out = _json_out(capsys)
    assert out["stages"] == ["ingest", "condition", "register", "ssm"]
    assert json.loads((tmp_path / "out" / "manifest.json").read_text())["seed"] == 3


def test_ingest_and_condition(tmp_path, volumes):
    mesh = tmp_path / "s.stl"
    assert main(["ingest", volumes[0]["volume"], "--out", str(mesh)]) == EXIT_OK
    assert is_watertight(load_mesh(mesh))
    assert main(["ingest", volumes[0]["volume"], "--label", "9", "--out", str(tmp_path / "x.stl")]) == EXIT_INVALID
    pts = tmp_path / "s.points.json"
    assert main(["condition", str(mesh), "--n-points", "120", "--out", str(pts), "--seed", "1"]) == EXIT_OK
    assert len(load_pointset(pts)) == 120
    assert main(["ingest", str(tmp_path / "absent.json"), "--out", str(mesh)]) == EXIT_INVALID


def test_register_build_synthesize_project(tmp_path, capsys):
    meshes = []
    for i, r in enumerate(ellipsoid_family(6, seed=1)):
        p = tmp_path / f"e{i}.stl"
        save_mesh(ellipsoid_mesh(r, 2), p)
        meshes.append(str(p))
    t = tmp_path / "rigid.transform.json"
    assert main(["register", meshes[0], meshes[1], "--mode", "rigid", "--out", str(tmp_path / "r.points.json"),
                 "--transform", str(t)]) == EXIT_OK
    assert t.exists()
    assert main(["build-ssm", *meshes, "--template", meshes[0], "--template-points", meshes[0],
                 "--variance", "0.99", "--out", str(tmp_path / "model")]) == EXIT_OK
    built = _json_out(capsys)
    assert 1 <= built["n_modes"] <= 3
    model = built["model"]
    assert main(["synthesize", model, "--out", str(tmp_path / "mean.points.json"),
                 "--mesh", str(tmp_path / "mean.obj")]) == EXIT_OK
    assert main(["project", model, str(tmp_path / "mean.points.json")]) == EXIT_OK
    b = np.array(_json_out(capsys)["b"])
    np.testing.assert_allclose(b, 0.0, atol=1e-9)
    assert main(["synthesize", model, "--b", ",".join(["1"] * 10), "--out", str(tmp_path / "x.json")]) == EXIT_RUNTIME


def test_metrics_identical(tmp_path, capsys):
    p = tmp_path / "m.stl"
    save_mesh(ellipsoid_mesh((6.0, 4.0, 3.0), 2), p)
    assert main(["metrics", str(p), str(p), "--csv", str(tmp_path / "m.csv")]) == EXIT_OK
    row = _json_out(capsys)
    assert row["dice"] == 1.0 and row["hausdorff_mm"] < 1e-12
    assert (tmp_path / "m.csv").read_text().startswith("subject,")


def test_spm(tmp_path, capsys):
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(5, 12)), rng.normal(size=(5, 12)) + 5.0
    np.savetxt(tmp_path / "a.csv", a, delimiter=",")
    (tmp_path / "b.json").write_text(json.dumps(b.tolist()))
    assert main(["spm", str(tmp_path / "a.csv"), str(tmp_path / "b.json")]) == EXIT_OK
    res = _json_out(capsys)
    assert res["clusters"] and abs(np.array(res["t"])).min() > res["critical_t"]


def test_stress_eval(tmp_path, capsys):
    (tmp_path / "s.json").write_text(json.dumps([{"F": np.eye(3).tolist(), "p": 0.0}]))
    assert main(["stress-eval", str(tmp_path / "s.json")]) == EXIT_INVALID
    capsys.readouterr()
    assert main(["stress-eval", str(tmp_path / "s.json"), "--phi0", "0.2", "--phi1", "0.8"]) == EXIT_OK
    sigma = np.array(_json_out(capsys)["states"][0]["sigma"])
    # the undeformed matrix carries an isotropic residual stress; fibrils are slack
    np.testing.assert_allclose(sigma, sigma[0, 0] * np.eye(3), atol=1e-12)
    (tmp_path / "bad.json").write_text(json.dumps([{"F": np.diag([1, 1, -1.0]).tolist()}]))
    assert main(["stress-eval", str(tmp_path / "bad.json"), "--phi0", "0.2", "--phi1", "0.8"]) == EXIT_INVALID


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "kneessm.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "build-ssm" in proc.stdout
