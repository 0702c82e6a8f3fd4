import numpy as np
import pytest

from osxray.data import load_dataset, synth_generate


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small synthetic 3-class dataset (side 32) shared by the slower tests."""
    root = tmp_path_factory.mktemp("tinydata")
    manifest = synth_generate(root, n_per_class=15, classes=3, side=32, seed=11)
    images, labels = load_dataset(manifest, 32)
    return {"root": root, "manifest": manifest, "images": images, "labels": labels}
