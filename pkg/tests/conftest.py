import numpy as np
import pytest
import torch
from hypothesis import settings

from villa.config import RunConfig

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**over) -> RunConfig:
    """Small model/data sizes that keep end-to-end tests fast."""
    cfg = RunConfig()
    cfg.generator.height = cfg.generator.width = 32
    cfg.generator.frames = 4
    cfg.generator.min_size, cfg.generator.max_size = 4.0, 6.0
    cfg.generator.max_speed = 1.5
    cfg.generator.min_visible = 6
    cfg.encoder.channels = 8
    cfg.responder.hidden = 16
    cfg.responder.seg_tokens = 2
    cfg.cam.queries, cfg.cam.keep = 4, 2
    cfg.max_iters = 2
    cfg.batch_size = 2
    cfg.data.episodes = 12
    for k, v in over.items():
        setattr(cfg, k, v)
    return cfg


@pytest.fixture
def tiny_cfg():
    return tiny_config()
