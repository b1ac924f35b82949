import numpy as np
import pytest

from spikedepth.events import InputChunk
from spikedepth.model import ModelConfig, SpikingDepthNet
from spikedepth.synthdata import make_dataset, load_dataset


def tiny_config(**overrides) -> ModelConfig:
    """Smallest geometry the architecture supports: 16x16, C0=2."""
    kw = dict(mode="binocular", in_channels=4, base_channels=2,
              input_height=16, input_width=16)
    kw.update(overrides)
    return ModelConfig(**kw)


def random_chunk(cfg: ModelConfig, rng, max_count: int = 3) -> InputChunk:
    data = rng.integers(0, max_count + 1,
                        size=(cfg.in_channels, cfg.input_height,
                              cfg.input_width))
    return InputChunk(data=data, n_frames=cfg.in_channels // 2,
                      window_length_ms=50.0)


def tiny_net(seed: int = 0, **overrides) -> SpikingDepthNet:
    cfg = tiny_config(**overrides)
    return SpikingDepthNet(cfg, np.random.default_rng(seed))


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Six 32x32 scenes, enough for smoke-level training and CLI tests."""
    root = tmp_path_factory.mktemp("smallds")
    make_dataset(root, count=6, seed=3, height=32, width=32)
    return root


@pytest.fixture(scope="session")
def small_samples(small_dataset):
    return load_dataset(small_dataset, n_frames=2, frame_ms=50.0)
