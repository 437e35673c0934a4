from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from apps.cli.main import main

SMALL_TRAINING = """
[osdnet]
panels = 512

[osdnet.embedding]
dim = 16

[osdnet.net]
hidden = 8
blocks = 1

[osdnet.net.embedding]
dim = 16

[trainer.offsubspace]
d = 8
D = 3
n_points = 20
batch = 64
checkpoint_samples = 50
sample_steps = 10

[trainer.subspace]
d = 3
D = 3
n_points = 10
batch = 32
checkpoint_samples = 20
sample_steps = 5
"""


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch, tmp_path):
    for name in ("FLOWLAB_OUT", "FLOWLAB_SEED", "FLOWLAB_THREADS", "FLOWLAB_LOG_LEVEL"):
        monkeypatch.delenv(name, raising=False)
    monkeypatch.chdir(tmp_path)


def write_config(tmp_path, body: str):
    path = tmp_path / "experiment.toml"
    path.write_text(body)
    return str(path)


def read_rows(path):
    with open(path, newline="") as handle:
        return list(csv.DictReader(handle))


def error_envelope(stderr: str) -> dict:
    lines = [line for line in stderr.splitlines() if line.startswith('{"error"')]
    return json.loads(lines[-1])


def read_manifest(out):
    return json.loads((out / "manifest.json").read_text())


def test_single_step_generation(tmp_path):
    config = write_config(tmp_path, "[dynamics]\ntrajectories = 8\n")
    out = tmp_path / "paths"
    assert main(["gen-paths", "--config", config, "--out", str(out), "--steps", "1"]) == 0

    data = np.loadtxt(out / "data.csv", delimiter=",", ndmin=2)
    mean = data.mean(axis=0)
    rows = read_rows(out / "endpoints.csv")
    assert len(rows) == 8
    for row in rows:
        start = np.array([float(row["start0"]), float(row["start1"])])
        end = np.array([float(row["end0"]), float(row["end1"])])
        assert np.allclose(end, start + (mean - start) * (1 - 1e-4), atol=1e-9)

    manifest = read_manifest(out)
    assert manifest["command"] == "gen-paths"
    assert "endpoints.csv" in manifest["outputs"]
    assert "trajectories/traj_0000.csv" in manifest["outputs"]


def test_bound_check_with_a_single_point(tmp_path):
    config = write_config(
        tmp_path, "[data]\nn_points = 1\n\n[bound_check]\ntimes = [0.5, 0.9]\ntaus = [0.9]\nsamples = 1000\n"
    )
    out = tmp_path / "bounds"
    assert main(["bound-check", "--config", config, "--out", str(out)]) == 0
    rows = read_rows(out / "bound_check.csv")
    assert len(rows) == 2
    assert all(row["bound"] == "" for row in rows)
    assert all(float(row["p_hat"]) == 0.0 for row in rows)


def test_bound_check_holds_on_sparse_data(tmp_path):
    config = write_config(tmp_path, "[bound_check]\ntimes = [0.9, 0.99]\ntaus = [0.99]\nsamples = 2000\n")
    out = tmp_path / "bounds"
    assert main(["bound-check", "--config", config, "--out", str(out)]) == 0
    rows = read_rows(out / "bound_check.csv")
    assert all(row["bound"] != "" for row in rows)
    assert read_manifest(out)["streamId"] == 2


@pytest.mark.parametrize("mode", ["offsubspace", "subspace"])
def test_train_zero_epochs(tmp_path, mode):
    config = write_config(tmp_path, SMALL_TRAINING)
    out = tmp_path / mode
    assert main(["train", "--config", config, "--out", str(out), "--mode", mode, "--epochs", "0"]) == 0

    assert len(read_rows(out / "metrics.csv")) == 1
    assert (out / "checkpoints" / "epoch_000000.json").exists()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["epochs"] == 0
    manifest = read_manifest(out)
    assert manifest["notes"]["mode"] == mode
    assert "epoch" in manifest["notes"]


def test_train_resume(tmp_path):
    config = write_config(tmp_path, SMALL_TRAINING)
    first = tmp_path / "first"
    assert main(["train", "--config", config, "--out", str(first), "--epochs", "2"]) == 0
    checkpoint = first / "checkpoints" / "epoch_000002.json"
    assert checkpoint.exists()

    second = tmp_path / "second"
    assert main(["train", "--out", str(second), "--resume", str(checkpoint), "--epochs", "4"]) == 0
    epochs = [int(row["epoch"]) for row in read_rows(second / "metrics.csv")]
    assert epochs == [0, 2, 4]


def test_train_with_a_broken_checkpoint(tmp_path, capsys):
    broken = tmp_path / "broken.json"
    broken.write_text('{"formatVersion": 1, "mode": ')
    assert main(["train", "--out", str(tmp_path / "out"), "--resume", str(broken)]) == 2
    envelope = error_envelope(capsys.readouterr().err)
    assert envelope["error"]["code"] == "CHECKPOINT_ERROR"
    assert "offset" in envelope["error"]["details"]


def test_emb_approx_writes_summary(tmp_path):
    config = write_config(tmp_path, "[emb_approx]\ndims = [8]\ngrid_points = 50\npanels = 512\n")
    out = tmp_path / "emb"
    assert main(["emb-approx", "--config", config, "--out", str(out)]) == 0
    rows = read_rows(out / "summary.csv")
    assert [(float(r["scale"]), int(r["dim"])) for r in rows] == [(1.0, 8), (1000.0, 8)]
    assert (out / "curves" / "s1000_dim8.csv").exists()
    for row in rows:
        assert row["pseudo_inverse"] == ("1" if float(row["condition_number"]) > 1e12 else "0")
    fallback = any(row["pseudo_inverse"] == "1" for row in rows)
    assert ("pseudoInverse" in read_manifest(out)["notes"]) == fallback


def test_emb_approx_reports_the_pseudo_inverse_at_full_size(tmp_path):
    config = write_config(tmp_path, "[emb_approx]\ndims = [256]\nscales = [1000.0]\ngrid_points = 20\n")
    out = tmp_path / "emb"
    assert main(["emb-approx", "--config", config, "--out", str(out)]) == 0
    (row,) = read_rows(out / "summary.csv")
    assert row["pseudo_inverse"] == "1"
    assert "pseudo-inverse" in read_manifest(out)["notes"]["pseudoInverse"]


def test_verify_core_json(tmp_path, capsys):
    out = tmp_path / "verify"
    assert main(["verify", "--out", str(out), "--modules", "core", "--json"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["passed"] is True
    assert {result["module"] for result in report["results"]} == {"core"}
    assert (out / "verify_report.json").exists()
    assert read_manifest(out)["streamId"] == 5


@pytest.mark.slow
def test_perturbed_optimal_field_fails_only_its_identity(tmp_path, capsys):
    out = tmp_path / "verify"
    code = main(["verify", "--out", str(out), "--modules", "osdnet", "--perturb-optimal", "0.1", "--json"])
    assert code == 1
    report = json.loads(capsys.readouterr().out)
    failures = [result["name"] for result in report["results"] if not result["passed"]]
    assert failures == ["optimal parameters reproduce the optimal field"]


def test_missing_config_exits_with_config_code(tmp_path, capsys):
    code = main(["gen-paths", "--config", str(tmp_path / "absent.toml"), "--out", str(tmp_path / "o")])
    assert code == 2
    envelope = error_envelope(capsys.readouterr().err)
    assert envelope["error"]["code"] == "CONFIG_ERROR"


def test_unknown_module_is_rejected(tmp_path):
    with pytest.raises(SystemExit) as excinfo:
        main(["verify", "--out", str(tmp_path), "--modules", "core,nope"])
    assert excinfo.value.code == 2


def test_environment_output_wins(tmp_path, monkeypatch):
    target = tmp_path / "from-env"
    monkeypatch.setenv("FLOWLAB_OUT", str(target))
    config = write_config(tmp_path, "[dynamics]\ntrajectories = 2\nsteps = 5\n")
    assert main(["gen-paths", "--config", config, "--out", str(tmp_path / "ignored")]) == 0
    assert (target / "manifest.json").exists()
    assert not (tmp_path / "ignored").exists()


def test_command_line_overrides_enter_the_digest(tmp_path):
    from_file = tmp_path / "steps.toml"
    from_file.write_text("[dynamics]\ntrajectories = 4\nsteps = 5\n")
    base = tmp_path / "base.toml"
    base.write_text("[dynamics]\ntrajectories = 4\n")

    runs = {
        "file": ["--config", str(from_file)],
        "flag": ["--config", str(base), "--steps", "5"],
        "other": ["--config", str(base), "--steps", "6"],
    }
    for name, flags in runs.items():
        assert main(["gen-paths", *flags, "--out", str(tmp_path / name)]) == 0
    manifests = {name: read_manifest(tmp_path / name) for name in runs}

    assert manifests["flag"]["overrides"] == {"dynamics.steps": 5}
    assert manifests["file"]["overrides"] == {}
    assert manifests["flag"]["configDigest"] == manifests["file"]["configDigest"]
    assert manifests["other"]["configDigest"] != manifests["flag"]["configDigest"]
    endpoints = {name: (tmp_path / name / "endpoints.csv").read_text() for name in runs}
    assert endpoints["flag"] == endpoints["file"]


def test_train_epochs_override_is_recorded(tmp_path):
    config = write_config(tmp_path, SMALL_TRAINING)
    out = tmp_path / "short"
    assert main(["train", "--config", config, "--out", str(out), "--mode", "subspace", "--epochs", "0"]) == 0
    assert read_manifest(out)["overrides"] == {"trainer.subspace.epochs": 0}
