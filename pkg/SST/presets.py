"""
Named model scales.

Usage:
    `get_preset(name)` returns a preset object whose `model()` builds the
    `ModelConfig` for that scale; `SST.config.apply_preset` copies it
    into a full configuration.

Design:
    - `ModelPreset` fixes the interface; subclasses only declare the
      three section configs.
    - `tiny` keeps unit tests and acceptance runs CPU friendly, `desk`
      matches the module defaults and `paper` scales up to 512-d
      embeddings, a 128-unit LSTM, a 64-unit dense layer and a
      Conv-TasNet-sized TCN.

Example:
    >>> get_preset("tiny").model().separator.lookahead_frames
    3
"""

from abc import ABC, abstractmethod

from SST.network import AoAHeadConfig, EmbeddingConfig, ModelConfig, SeparatorConfig


class ModelPreset(ABC):
    """A consistent set of network sizes."""

    name: str

    @abstractmethod
    def embedding(self) -> EmbeddingConfig:
        raise NotImplementedError

    @abstractmethod
    def aoa_head(self) -> AoAHeadConfig:
        raise NotImplementedError

    @abstractmethod
    def separator(self) -> SeparatorConfig:
        raise NotImplementedError

    def model(self) -> ModelConfig:
        return ModelConfig(self.embedding(), self.aoa_head(), self.separator())


class TinyPreset(ModelPreset):
    name = "tiny"

    def embedding(self) -> EmbeddingConfig:
        return EmbeddingConfig(
            embed_dim=8,
            conv_channels=4,
            temporal_kernel=3,
            spatial_kernel=3,
            spatial_stride=2,
            residual_blocks=1,
            profile_pool=(8, 8),
        )

    def aoa_head(self) -> AoAHeadConfig:
        return AoAHeadConfig(lstm_hidden=8, dense_hidden=8)

    def separator(self) -> SeparatorConfig:
        return SeparatorConfig(
            tcn_blocks=1,
            convs_per_block=3,
            channels=16,
            hidden_channels=24,
            spatial_channels=8,
            lookahead_frames=3,
        )


class DeskPreset(ModelPreset):
    name = "desk"

    def embedding(self) -> EmbeddingConfig:
        return EmbeddingConfig()

    def aoa_head(self) -> AoAHeadConfig:
        return AoAHeadConfig()

    def separator(self) -> SeparatorConfig:
        return SeparatorConfig()


class PaperPreset(ModelPreset):
    """Full-size network for GPU training runs."""

    name = "paper"

    def embedding(self) -> EmbeddingConfig:
        return EmbeddingConfig(
            embed_dim=512,
            conv_channels=16,
            residual_blocks=8,
            profile_pool=(2, 2),
        )

    def aoa_head(self) -> AoAHeadConfig:
        return AoAHeadConfig(lstm_hidden=128, dense_hidden=64)

    def separator(self) -> SeparatorConfig:
        return SeparatorConfig(
            tcn_blocks=3,
            convs_per_block=8,
            channels=128,
            hidden_channels=512,
            spatial_channels=64,
            lookahead_frames=9,
        )


PRESETS = ("tiny", "desk", "paper")


def get_preset(name: str) -> ModelPreset:
    """
    Return the preset registered under `name`.

    Raises
    ------
    ValueError
        If the name is not a known preset.
    """
    match name.lower():
        case "tiny":
            return TinyPreset()
        case "desk":
            return DeskPreset()
        case "paper":
            return PaperPreset()
        case _:
            raise ValueError(f"Unsupported preset: {name}")
