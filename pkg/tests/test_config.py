from __future__ import annotations

import pytest

from core.config import Settings, config_digest, load_experiment_config
from core.errors import EXIT_CONFIG, ConfigError
from core.schemas.experiment import ExperimentConfig


def test_defaults_without_a_file():
    config = load_experiment_config(None)
    assert config.seed == 0
    assert config.data.mode == "sparse"
    assert config.trainer.offsubspace.d == 100
    assert config.osdnet.embedding.scale == 1000.0


def test_toml_sections_are_read(tmp_path):
    path = tmp_path / "experiment.toml"
    path.write_text('seed = 11\n[data]\nn_points = 3\n[osdnet.embedding]\ndim = 8\n')
    config = load_experiment_config(path)
    assert config.seed == 11
    assert config.data.n_points == 3
    assert config.osdnet.embedding.dim == 8


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError) as excinfo:
        load_experiment_config(tmp_path / "absent.toml")
    assert excinfo.value.exit_code == EXIT_CONFIG


def test_invalid_toml(tmp_path):
    path = tmp_path / "broken.toml"
    path.write_text("seed = \n")
    with pytest.raises(ConfigError):
        load_experiment_config(path)


def test_unreadable_config_is_a_config_error(tmp_path):
    path = tmp_path / "latin.toml"
    path.write_bytes(b"seed = 1 # \xff\n")
    with pytest.raises(ConfigError):
        load_experiment_config(path)
    with pytest.raises(ConfigError) as excinfo:
        load_experiment_config(tmp_path)
    assert excinfo.value.exit_code == EXIT_CONFIG


def test_subspace_checkpoint_samples_default():
    assert ExperimentConfig().trainer.subspace.checkpoint_samples == 10_000
    assert ExperimentConfig().trainer.subspace.distill_steps == 0


@pytest.mark.parametrize(
    "body",
    [
        "[data]\nunknown_key = 1\n",
        "[dynamics]\nsteps = 0\n",
        "[osdnet.embedding]\ndim = 7\n",
        "[data]\nd = 2\nsubspace_dim = 3\n",
        "[trainer.subspace]\nd = 3\nD = 4\n",
        "[trainer.offsubspace]\nepochs = 0\n",
    ],
)
def test_invalid_values_are_config_errors(tmp_path, body):
    path = tmp_path / "bad.toml"
    path.write_text(body)
    with pytest.raises(ConfigError) as excinfo:
        load_experiment_config(path)
    assert excinfo.value.details["errors"]


def test_digest_tracks_content():
    base = ExperimentConfig()
    assert config_digest(base) == config_digest(ExperimentConfig())
    assert config_digest(base) != config_digest(base.model_copy(update={"seed": 1}))


def test_settings_from_environment(monkeypatch):
    monkeypatch.setenv("FLOWLAB_THREADS", "4")
    monkeypatch.setenv("FLOWLAB_SEED", "9")
    settings = Settings()
    assert settings.threads == 4
    assert settings.seed == 9
