import numpy as np
import pytest

from SST.audio import ComplexSpectrogram, StftConfig, log_power_spectrogram
from SST.network import (
    AoAHeadConfig,
    EmbeddingConfig,
    ModelConfig,
    SeparatorConfig,
    SeparatorInputs,
    unit_ratios,
)
from SST.simulate import ArrayGeometry


@pytest.fixture(autouse=True)
def isolated_state(tmp_path, monkeypatch):
    """Keep log files out of the home directory and run without SST_DEBUG."""
    monkeypatch.setenv("XDG_STATE_HOME", str(tmp_path / "state"))
    monkeypatch.delenv("SST_DEBUG", raising=False)


@pytest.fixture
def geometry():
    """The default four-microphone linear array."""
    return ArrayGeometry.linear()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def stft_config():
    return StftConfig()


@pytest.fixture
def tiny_model_config():
    """A separator small enough to run forward and backward in a test."""
    return ModelConfig(
        EmbeddingConfig(
            embed_dim=4,
            conv_channels=2,
            temporal_kernel=2,
            spatial_kernel=3,
            residual_blocks=1,
            profile_pool=(2, 4),
        ),
        AoAHeadConfig(lstm_hidden=4, dense_hidden=3),
        SeparatorConfig(
            tcn_blocks=2,
            convs_per_block=2,
            channels=4,
            hidden_channels=6,
            spatial_channels=3,
            lookahead_frames=2,
            noncausal_layers_per_block=1,
        ),
    )


@pytest.fixture
def make_inputs(rng, stft_config):
    """Random separator inputs with profile stacks pooled to (3, 5)."""

    def build(frames=12):
        shape = (4, stft_config.freq_bins, frames)
        bins = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        spec = ComplexSpectrogram(bins, stft_config)
        return SeparatorInputs(
            reference=bins[0],
            lps=log_power_spectrogram(spec, 0),
            ratios=unit_ratios(spec),
            stft=stft_config,
            length=(frames - 1) * stft_config.hop_samples + stft_config.win_samples,
            fixed_premask=rng.uniform(-1, 1, shape[1:]),
            audible=rng.random((3, 3, 5)),
            audible_frames=np.array([0, 4, 9]),
            inaudible=rng.random((2, 3, 5)),
            inaudible_frames=np.array([2, 7]),
        )

    return build
