import json
import subprocess
import sys

import numpy as np
import pytest

from probpnp import cli
from probpnp.synth import SceneParams, gen_scene, scene_to_dict, write_scene


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def scene4(tmp_path):
    path = tmp_path / "s4.json"
    write_scene(gen_scene(SceneParams(pose_type="4dof", n_points=10, noise_sigma=1.0), 3), path)
    return path


@pytest.fixture
def scene6(tmp_path):
    path = tmp_path / "s6.json"
    write_scene(gen_scene(SceneParams(pose_type="6dof", n_points=16), 5), path)
    return path


def test_gen_then_solve_noise_free(tmp_path, capsys):
    path = tmp_path / "g.json"
    assert run(["gen", "--pose-type", "6dof", "--seed", 4, "--out", path], capsys)[0] == 0
    code, out, _ = run(["solve", path], capsys)
    assert code == 0
    doc = json.loads(out)
    assert doc["result"]["pos_err"] < 1e-6
    assert doc["meta"]["seed"] == 0 and doc["meta"]["command"] == "solve"
    assert "solver" in doc["meta"]["config"]


def test_gen_directory(tmp_path, capsys):
    out = tmp_path / "dir"
    assert run(["gen", "--count", 3, "--out", out], capsys)[0] == 0
    assert len(list(out.glob("*.json"))) == 3


def test_gradcheck_default_scene_passes(capsys):
    code, out, _ = run(["gradcheck", "--pose-type", "4dof"], capsys)
    assert code == 0
    res = json.loads(out)["result"]
    assert res["kl_max_rel_err"] < 1e-4 and res["reg_max_rel_err"] < 1e-4


def test_loss_report(scene4, capsys):
    code, out, _ = run(["loss", scene4, "--with-reg", "--amis-K", 16], capsys)
    assert code == 0
    res = json.loads(out)["result"]
    assert res["total"] == pytest.approx(res["l_tgt"] + res["l_pred"])
    assert len(res["grad_w2D"]) == 10


def test_sample_dump(scene4, tmp_path, capsys):
    dump = tmp_path / "samples.csv"
    code, out, _ = run(["sample", scene4, "--amis-T", 2, "--amis-K", 8, "--dump-samples", dump],
                       capsys)
    assert code == 0
    lines = [l for l in dump.read_text().splitlines() if not l.startswith("#")]
    assert lines[0].split(",") == list(cli.SAMPLE_COLUMNS_4)
    assert len(lines) == 1 + 16


def test_bench_columns(tmp_path, capsys):
    suite = tmp_path / "suite.json"
    suite.write_text(json.dumps({"pose_type": "4dof", "noise_sigma": [0.0], "n_points": [8],
                                 "symmetry_order": [1], "n_seeds": 2}))
    code, out, _ = run(["bench", suite, "--format", "csv", "--amis-K", 8], capsys)
    assert code == 0
    rows = [l for l in out.splitlines() if not l.startswith("#")]
    assert rows[0].split(",") == list(cli.BENCH_COLUMNS)
    assert len(rows) == 2


def _commands(tmp_path, scene4, scene6):
    suite = tmp_path / "suite.json"
    suite.write_text(json.dumps({"pose_type": "4dof", "noise_sigma": [1.0], "n_points": [8],
                                 "symmetry_order": [1, 2], "n_seeds": 2}))
    return {
        "gen": ["gen", "--pose-type", "4dof", "--noise", 1.0],
        "solve": ["solve", scene6],
        "sample": ["sample", scene4, "--amis-K", 8],
        "loss": ["loss", scene4, "--amis-K", 8, "--with-reg"],
        "gradcheck": ["gradcheck", scene4, "--amis-K", 8],
        "train": ["train", "--pose-type", "4dof", "--steps", 2, "--n-views", 2, "--n-heldout", 1,
                  "--n-points", 8],
        "bench": ["bench", suite, "--amis-K", 8, "--jobs", 2],
    }


@pytest.mark.parametrize("command", ["gen", "solve", "sample", "loss", "gradcheck", "train",
                                     "bench"])
def test_every_command_is_seed_deterministic(command, tmp_path, scene4, scene6, capsys):
    argv = _commands(tmp_path, scene4, scene6)[command]
    outputs = []
    for k in range(2):
        path = tmp_path / f"{command}_{k}.out"
        assert run(argv + ["--seed", 11, "--out", path], capsys)[0] == 0
        outputs.append(path.read_bytes())
    assert outputs[0] == outputs[1]
    if command in ("gen", "sample", "loss", "train", "bench"):
        path = tmp_path / f"{command}_other.out"
        run(argv + ["--seed", 12, "--out", path], capsys)
        assert path.read_bytes() != outputs[0]


def test_missing_file_exits_2(tmp_path, capsys):
    code, _, err = run(["solve", tmp_path / "nope.json"], capsys)
    assert code == 2
    assert json.loads(err)["error"] == "config_error"


def test_schema_error_names_field(tmp_path, capsys):
    doc = scene_to_dict(gen_scene(SceneParams(), 0))
    del doc["camera"]["fy"]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    code, _, err = run(["solve", path], capsys)
    assert code == 2
    rep = json.loads(err)
    assert rep["error"] == "schema_error" and rep["field"] == "camera.fy"


def test_malformed_json_reports_line(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{\n"camera": [\n')
    code, _, err = run(["solve", path], capsys)
    assert code == 2 and "line" in json.loads(err)


def test_bench_unknown_key_rejected(tmp_path, capsys):
    suite = tmp_path / "suite.json"
    suite.write_text(json.dumps({"noise": [1.0]}))
    code, _, err = run(["bench", suite], capsys)
    assert code == 2 and json.loads(err)["error"] == "schema_error"


def test_domain_error_exits_1(tmp_path, capsys):
    doc = scene_to_dict(gen_scene(SceneParams(pose_type="4dof", n_points=8), 0))
    for p in doc["points"]:
        p["x3d"] = [0.0, 0.0, 0.0]
    path = tmp_path / "degenerate.json"
    path.write_text(json.dumps(doc))
    code, _, err = run(["solve", path], capsys)
    assert code == 1
    assert json.loads(err)["error"] in ("singular_system", "no_valid_hypothesis")


def test_invalid_option_value_exits_2(scene4, capsys):
    code, _, err = run(["sample", scene4, "--amis-T", 0], capsys)
    assert code == 2


def test_console_entry_point(scene6):
    proc = subprocess.run([sys.executable, "-m", "probpnp.cli", "solve", str(scene6),
                           "--format", "csv"], capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    lines = proc.stdout.splitlines()
    assert lines[0].startswith("# tool: probpnp")
    header = [l for l in lines if not l.startswith("#")][0].split(",")
    assert "pos_err" in header


def test_max_relative_error_floor():
    a = [np.array([1e-9, 2.0])]
    n = [np.array([0.0, 2.0])]
    assert cli.max_relative_error(a, n) < 1e-4
