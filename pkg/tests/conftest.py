import numpy as np
import pytest

from egn.config import RunConfig
from egn.synth import generate


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running reproductions")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_config(tmp_path):
    config = RunConfig.preset("toy").with_overrides(
        [
            f"output_dir={tmp_path / 'out'}",
            "data.n_patients=4",
            "data.windows_per_patient=8",
            "data.n_folds=2",
            "extractor.epochs=2",
            "extractor.batch_size=8",
            "extractor.base_channels=4",
            "training.epochs=2",
            "training.batch_size=4",
        ]
    )
    return config.validate()


@pytest.fixture
def toy_bundle(toy_config):
    c = toy_config
    return generate(
        seed=c.data.seed,
        n_patients=c.data.n_patients,
        windows_per_patient=c.data.windows_per_patient,
        num_genes=c.model.num_genes,
        image_size=c.model.image_size,
        skew_fraction=c.data.skew_fraction,
        slides_per_patient=c.data.slides_per_patient,
        motifs_per_window=c.data.motifs_per_window,
    )
