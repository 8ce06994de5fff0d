from typing import Tuple

import pytest
import torch

from rsjoint.config import AugmentationPolicy, EncoderSpec, SyntheticCorpusSpec, TrainingConfig
from rsjoint.data import LabeledDataset, UnlabeledDataset, generate_synthetic_corpus


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run end-to-end desk runs")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def single_thread_torch():
    """Keep torch deterministic and quick on shared CI machines."""
    previous = torch.get_num_threads()
    torch.set_num_threads(1)
    yield
    torch.set_num_threads(previous)


@pytest.fixture
def tiny_spec() -> EncoderSpec:
    return EncoderSpec(
        stage_widths=[8, 16],
        blocks_per_stage=[1, 1],
        stem_width=8,
        input_size=8,
        proj_hidden_dim=16,
        proj_out_dim=8,
        n_classes=3,
        bn_groups=2,
    )


@pytest.fixture
def tiny_config(tiny_spec) -> TrainingConfig:
    return TrainingConfig(
        encoder=tiny_spec,
        augment=AugmentationPolicy(out_size=8),
        queue_capacity=16,
        batch_size=4,
        epochs=1,
        prefetch=0,
    )


@pytest.fixture
def tiny_corpus_spec() -> SyntheticCorpusSpec:
    return SyntheticCorpusSpec(n_natural=24, n_rs=24, n_scenes=12, k_classes=3, image_size=8, seed=7)


@pytest.fixture
def tiny_corpus(tiny_corpus_spec) -> Tuple[LabeledDataset, UnlabeledDataset]:
    return generate_synthetic_corpus(tiny_corpus_spec)
