import sys

import numpy as np
import pytest
import torch

from mmer.audio_encoder import AudioEncoderConfig
from mmer.corpus import ToyCorpusConfig, generate_toy_corpus
from mmer.video_encoder import VideoEncoderConfig


@pytest.fixture(autouse=True)
def _deterministic():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def small_toy(tmp_path_factory):
    """A 4-class toy corpus small enough for unit tests (10 clips per class)."""
    out = tmp_path_factory.mktemp("toy")
    return generate_toy_corpus(out, n_per_class=10, rng_seed=3)


def micro_audio(**kw) -> AudioEncoderConfig:
    base = dict(embed_dim=8, depths=[1, 1, 1, 1], heads=[1, 1, 2, 2], mel_bands=32, frames=32)
    base.update(kw)
    return AudioEncoderConfig(**base)


def micro_video(**kw) -> VideoEncoderConfig:
    base = dict(frames_per_clip=8, resize=12, crop=12, widths=[4, 4, 8, 8], blocks=[1, 1, 1, 1], embed_dim=64)
    base.update(kw)
    return VideoEncoderConfig(**base)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(mod.RESULTS):
        status, line = mod.RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d} {status}  {line}")
