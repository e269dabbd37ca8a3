import pytest

from gradattn.config import RunConfig
from gradattn.data import SyntheticSpec, generate_synthetic


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small synthetic set for fast unit tests: 3 classes x 8/4 images."""
    root = tmp_path_factory.mktemp("tiny_synth")
    spec = SyntheticSpec(
        num_classes=3, image_size=64, motif_size=8,
        train_per_class=8, test_per_class=4, noise=0.05, seed=11,
    )
    manifest = generate_synthetic(spec, root)
    return spec, manifest


@pytest.fixture
def tiny_config():
    return RunConfig(num_classes=3, epochs=1, batch_size=8, seed=5)
