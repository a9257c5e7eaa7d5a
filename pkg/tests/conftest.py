import numpy as np
import pytest

from eyelab.encoder import EncoderConfig, new_encoder
from eyelab.toydata import ToyDataSpec, ToyTask, generate_toy_dataset

# Small encoder used across tests: big enough to learn toy structure,
# small enough that numpy forward/backward stays fast.
SMALL = EncoderConfig(patch_size=8, embed_dim=32, depth=2, n_heads=4, image_size=32)

# Gradient-check sized config: one block, 8x8 input.
TINY = EncoderConfig(patch_size=4, embed_dim=16, depth=1, n_heads=2, image_size=8)


@pytest.fixture(scope="session")
def small_config():
    return SMALL


@pytest.fixture(scope="session")
def tiny_config():
    return TINY


@pytest.fixture(scope="session")
def small_encoder():
    return new_encoder(SMALL, seed=11)


def _dataset(tmp_path_factory, name, **kw):
    spec = ToyDataSpec(**kw)
    out = tmp_path_factory.mktemp(name)
    return generate_toy_dataset(spec, seed=77, out_dir=out), spec


@pytest.fixture(scope="session")
def classify_ds(tmp_path_factory):
    return _dataset(
        tmp_path_factory, "classify",
        task=ToyTask.CLASSIFY, n_images=48, image_size=32, n_classes=3, patch_size=8)


@pytest.fixture(scope="session")
def vessel_ds(tmp_path_factory):
    return _dataset(
        tmp_path_factory, "vessel",
        task=ToyTask.SEGMENT_VESSEL, n_images=24, image_size=32, n_classes=2, patch_size=8)


@pytest.fixture(scope="session")
def landmark_ds(tmp_path_factory):
    return _dataset(
        tmp_path_factory, "landmark",
        task=ToyTask.LANDMARK, n_images=24, image_size=32, n_classes=2, patch_size=8)


@pytest.fixture(scope="session")
def biomarker_ds(tmp_path_factory):
    return _dataset(
        tmp_path_factory, "biomarker",
        task=ToyTask.BIOMARKER, n_images=24, image_size=32, n_classes=2, patch_size=8)


@pytest.fixture(scope="session")
def forecast_ds(tmp_path_factory):
    return _dataset(
        tmp_path_factory, "forecast",
        task=ToyTask.FORECAST, n_images=24, image_size=32, n_classes=2, patch_size=8)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
