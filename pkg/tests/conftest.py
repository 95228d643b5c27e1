from pathlib import Path
import pytest
import torch

from neuraldress.engine.body import make_toy_body
from neuraldress.engine.dataset import generate_synthetic_dataset, load_dataset, load_frames
from neuraldress.engine.loader import shipped_configs


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def tiny():
    return shipped_configs().get("tiny")


@pytest.fixture(scope="session")
def body(tiny):
    return make_toy_body(tiny.body)


@pytest.fixture(scope="session")
def dataset_root(tiny, tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("synthetic")
    generate_synthetic_dataset(tiny.world, root, tiny.body)
    return root


@pytest.fixture(scope="session")
def frames(tiny, dataset_root):
    return load_frames(load_dataset(dataset_root), tiny.video.image_size)
