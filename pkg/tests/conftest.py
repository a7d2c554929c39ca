import numpy as np
import pytest
import torch

from weathergan.dataset import load_dataset
from weathergan.generator import GeneratorConfig
from weathergan.toy import make_toy_corpus

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    """Small two-domain toy corpus on disk: (root, manifest, index)."""
    root = tmp_path_factory.mktemp("toy")
    manifest = make_toy_corpus(root, n_per_domain=40, size=32, seed=1)
    return root, manifest, load_dataset(root, manifest)


@pytest.fixture(scope="session")
def full_toy_corpus(tmp_path_factory):
    """The 200-images-per-domain 64x64 corpus used by the end-to-end experiment."""
    root = tmp_path_factory.mktemp("toy_full")
    manifest = make_toy_corpus(root, n_per_domain=200, size=64, seed=0)
    return root, manifest, load_dataset(root, manifest)


@pytest.fixture
def tiny_gen_config():
    return GeneratorConfig(base_channels=4, n_residual_blocks=1, n_down=3, n_s=4, relevant_cues=(1, 2))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_train_config(**overrides):
    """Toy setup shrunk further for 32x32 images so unit tests stay fast."""
    from weathergan.toy import toy_config

    params = dict(
        image_size=(32, 32),
        batch_size=2,
        total_iterations=10,
        decay_start=5,
        gen_base_channels=4,
        gen_residual_blocks=1,
        disc_base_channels=8,
        disc_layers=2,
    )
    params.update(overrides)
    return toy_config(**params)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
