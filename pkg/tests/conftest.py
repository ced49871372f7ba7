import numpy as np
import pytest

from layerfields.dataio import load_dataset
from layerfields.scenegen import emit_dataset, two_blob_scene


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    """Small but real dataset: 8 views of the bundled scene at 40x40."""
    spec = two_blob_scene(views=8, image_size=40)
    spec.rig.focal_px = 44.0
    out = tmp_path_factory.mktemp("tiny_ds") / "scene"
    emit_dataset(spec, out, rng=np.random.default_rng(1), quadrature_steps=384)
    return out


@pytest.fixture(scope="session")
def tiny_dataset(tiny_dataset_dir):
    return load_dataset(tiny_dataset_dir)
