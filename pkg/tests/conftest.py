import tempfile
from pathlib import Path

import numpy as np
import pytest
import torch
from click.testing import CliRunner

from umbra_tts.audio_dsp import MelConfig
from umbra_tts.denoiser import DenoiserConfig
from umbra_tts.manifest import write_manifest
from umbra_tts.triplet_forge import synth_mixture, synthetic_triplet


@pytest.fixture
def temp_dir():
    """Create a temporary directory for test files."""
    with tempfile.TemporaryDirectory() as tmpdirname:
        yield Path(tmpdirname)


@pytest.fixture
def mel_cfg():
    return MelConfig()


@pytest.fixture
def tiny_config():
    """A denoiser small enough to train for a few steps inside a unit test."""
    return DenoiserConfig(
        model_dim=32,
        n_blocks=2,
        n_heads=4,
        d_text=16,
        n_mels=40,
        max_frames=512,
        ser_embed_dim=32,
        time_embed_dim=32,
        text_blocks=1,
    )


@pytest.fixture
def grad_config():
    """The gradient-check configuration: F=8, d=32, 2 blocks."""
    return DenoiserConfig(
        model_dim=32,
        n_blocks=2,
        n_heads=4,
        d_text=8,
        n_mels=8,
        max_frames=16,
        ser_embed_dim=16,
        time_embed_dim=16,
        text_blocks=1,
        text_kernel=3,
    )


@pytest.fixture
def perturb():
    """Return a helper that adds seeded noise to every parameter.

    Fresh models have zero adaLN heads, which hides most of the network
    from gradients and from the conditioning vector.
    """

    def _perturb(model, scale=0.1, seed=0):
        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for p in model.parameters():
                p.add_(scale * torch.randn(p.shape, generator=generator).to(p.dtype))
        return model

    return _perturb


@pytest.fixture
def toy_triplets(mel_cfg):
    """Four synthetic triplets with known stems."""
    rng = np.random.default_rng(7)
    return [
        synthetic_triplet(synth_mixture(rng, mel_cfg, ser=ser), mel_cfg, sample_id=f"s{i}")
        for i, ser in enumerate([0.2, 0.4, 0.6, 0.8])
    ]


@pytest.fixture
def toy_manifest(temp_dir, toy_triplets):
    return write_manifest(toy_triplets, temp_dir / "corpus" / "manifest.jsonl")


@pytest.fixture
def cli_runner():
    """Create a Click CLI test runner."""
    return CliRunner()
