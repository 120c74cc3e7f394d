import pytest

from mowe.config import config_toml, settings, toy_config
from mowe.pipeline import build_model
from mowe.synthdata import generate_from_config, split


@pytest.fixture
def toy():
    """Tiny configuration for fast model tests."""
    return toy_config()


@pytest.fixture
def toy_dataset(toy):
    """Synthetic dataset generated from the toy configuration."""
    return generate_from_config(toy.data, seed=0)


@pytest.fixture
def toy_splits(toy, toy_dataset):
    """Stratified (train, eval) split of the toy dataset."""
    return split(toy_dataset, toy.data.train_fraction, seed=0)


@pytest.fixture
def toy_model(toy):
    """Freshly initialised toy model."""
    return build_model(toy, seed=0)


@pytest.fixture
def toy_config_file(tmp_path, toy):
    """The toy configuration written as a TOML file."""
    path = tmp_path / "toy.toml"
    path.write_text(config_toml(toy), encoding="utf-8")
    return path


@pytest.fixture
def temp_runs_dir(tmp_path, monkeypatch):
    """Point run directories at a temporary location."""
    runs = tmp_path / "runs"
    monkeypatch.setattr(settings, "RUNS_DIR", str(runs))
    yield runs


@pytest.fixture(autouse=True)
def isolated_settings(monkeypatch):
    """Keep MOWE_* values from the developer's environment out of the tests."""
    monkeypatch.setattr(settings, "CONFIG_PATH", "")
    monkeypatch.setattr(settings, "THREADS", 1)
    monkeypatch.setattr(settings, "LOG_LEVEL", "WARNING")
