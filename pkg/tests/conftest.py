import pytest

from natiqa import synthetic
from natiqa.data import load_manifest


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """48-sample 32x32 synthetic dataset shared by training/CLI tests."""
    out = tmp_path_factory.mktemp("tiny_dataset")
    config = synthetic.SynthConfig(count=48, image_size=(32, 32), seed=123)
    manifest = synthetic.generate(config, out)
    return out, manifest


@pytest.fixture(scope="session")
def tiny_manifest(tiny_dataset):
    out, _ = tiny_dataset
    return load_manifest(out / "manifest.json")
