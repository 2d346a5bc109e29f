import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from data.synth_corpus import CorpusConfig, generate_corpus  # noqa: E402
from utils.patch_sampler import SlidePatchIndex  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False, help="run long training tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(scope="session")
def tiny_corpus():
    """One 512 px slide per scanner, four mitoses each"""
    cfg = CorpusConfig(corpus_seed=11, slides_per_scanner=1, slide_size=512, mitoses_per_slide=4,
                       mitoses_jitter=0, distractors_per_slide=30, patch_size=64)
    return generate_corpus(cfg)


@pytest.fixture(scope="session")
def pair_corpus():
    """Two 256 px slides per scanner so a hold-out split exists"""
    cfg = CorpusConfig(corpus_seed=5, slides_per_scanner=2, slide_size=256, mitoses_per_slide=3,
                       mitoses_jitter=0, distractors_per_slide=15, patch_size=64)
    return generate_corpus(cfg)


@pytest.fixture(scope="session")
def patch_index(tiny_corpus):
    return SlidePatchIndex(tiny_corpus.slides, 64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
