import numpy as np
import pytest

from sdmcalibrate.classes.calibration import RescalerConfig
from sdmcalibrate.classes.estimator import build_estimator
from sdmcalibrate.classes.session import Session
from sdmcalibrate.classes.synthetic import blob_bundle
from sdmcalibrate.classes.training import TrainingRunConfig


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def session():
    return Session(seed=0, threads=1)


def small_config(**overrides):
    """a configuration that trains in well under a second"""
    values = dict(
        j=2,
        max_epochs=3,
        batch_size=25,
        lr=5e-2,
        alpha=0.9,
        m=16,
        rescaler=RescalerConfig(lr=1e-3, max_epochs=5, patience=2),
    )
    values.update(overrides)
    return TrainingRunConfig(**values)


@pytest.fixture(scope="module")
def blobs():
    return blob_bundle(200, 200, 100, C=2, D=6, separation=4.0, seed=0)


@pytest.fixture(scope="module")
def trained(blobs):
    return build_estimator(blobs, small_config(), Session(seed=0, threads=1))


@pytest.fixture
def config():
    return small_config
