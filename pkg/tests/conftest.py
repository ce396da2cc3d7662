from pathlib import Path

import numpy as np
import pytest

import intertwined
from intertwined.utils.architectures import HyperConfig
from intertwined.utils.data import synth_generate
from intertwined.utils.stats import AccuracyTable

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture(autouse=True)
def isolated_settings(monkeypatch, tmp_path):
    """Keep run manifests and progress bars out of the working tree."""
    monkeypatch.setitem(intertwined.config, "DATA_DIR", tmp_path / "data")
    monkeypatch.setitem(intertwined.config, "PROGRESS", False)
    monkeypatch.setitem(intertwined.config, "PRECISION", "float64")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def accuracy_table_path():
    return DATA_DIR / "subject_accuracies.tsv"


@pytest.fixture
def accuracy_table(accuracy_table_path):
    return AccuracyTable.read(accuracy_table_path)


@pytest.fixture
def small_dataset():
    """Four-channel, 32-sample trials; 5 per class."""
    return synth_generate(5, seed=3, noise_std=0.1, n_channels=4, n_samples=32)


@pytest.fixture
def small_config():
    """A two-module intertwined net sized for the small dataset."""
    return HyperConfig(
        family="intertwined",
        module_count=2,
        tdfc_units=[3, 3],
        sdc_kernels=[2, 2],
        sdc_kernel_sizes=[3, 3],
        pool_size=2,
        lstm_units=[4],
        fc_units=[5],
        custom=True,
    )
