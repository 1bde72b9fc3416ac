import numpy as np
import pytest

from fewcorr.config import Config
from fewcorr.data import SynthSpec, generate_synthetic


def micro_config(**overrides) -> Config:
    """A config small enough that a full train/eval cycle takes a second."""
    cfg = Config()
    cfg.set("episode.n_way", 3)
    cfg.set("episode.n_query", 3)
    cfg.set("backbone.blocks", 2)
    cfg.set("backbone.widths", [8, 8])
    cfg.set("backbone.downsample_blocks", 2)
    cfg.set("backbone.feature_size", 5)
    cfg.set("mixture.k", 4)
    cfg.set("mixture.iters", 2)
    cfg.set("train.epochs", 1)
    cfg.set("train.episodes_per_epoch", 2)
    cfg.set("eval.episodes", 3)
    for key, value in overrides.items():
        cfg.set(key, value)
    return cfg


@pytest.fixture(scope="session")
def tiny_ds():
    spec = SynthSpec(base_classes=4, novel_classes=3, images_per_class=10,
                     size=32, seed=11)
    return generate_synthetic(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
