import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from crossframe.ditcore import (
    DiTConfig,
    LatentVideo,
    NoiseSchedule,
    TextTokens,
    VideoDiT,
)


def small_config(layers=2, heads=1, head_dim=8, latent_channels=6, **kw) -> DiTConfig:
    return DiTConfig(layers=layers, heads=heads, head_dim=head_dim,
                     model_dim=heads * head_dim, latent_channels=latent_channels, **kw)


def random_instance(rng, frames=3, height=2, width=2, text_len=1, channels=6):
    latent = LatentVideo(rng.standard_normal((frames, height, width, channels)).astype(np.float32))
    text = TextTokens(rng.standard_normal((text_len, channels)).astype(np.float32))
    return latent, text


@pytest.fixture(scope="session")
def tiny_model():
    return VideoDiT(small_config(), seed=11)


@pytest.fixture(scope="session")
def schedule():
    return NoiseSchedule.cosine(8, seed=5)


@pytest.fixture(autouse=True)
def _single_thread_torch():
    torch.set_num_threads(1)
