"""
Spatial networks: profile embedders, the AoA head, the pre-mask and the
TCN mask estimator.

A model is a flat dictionary of named parameter tensors shared by four
small modules:

    embed.audible.*     3D conv + residual stack over pooled MUSIC profiles
    embed.inaudible.*   the same over pooled range x angle profiles
    aoa.*               LSTM -> dense ReLU -> dense, clamped to [0, 180]
    phase.*             two 3x3 convs producing a per (mic, freq) phase offset
    sep.*               spatial feature map, input conv, TCN layers, mask head

Everything here works on one example at a time with explicit shapes,
channels first: [channels, frames].
"""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from SST import tensor as T
from SST.audio import ComplexSpectrogram, StftConfig
from SST.errors import CheckpointVersionError, ConfigError, SequenceError, ShapeError
from SST.simulate import SPEED_OF_SOUND, ArrayGeometry
from SST.tensor import Tensor

logger = logging.getLogger(__name__)

LPS_SCALE = 0.1
NORM_EPS = 1e-5
PRELU_INIT = 0.25
PREMASK_GUARD = 1e-10
IDENTITY_BIAS = 10.0
MODEL_FORMAT = "sst-separator"
MODEL_VERSION = 1

CONDITIONINGS = ("lps", "aoa", "embedding")
PREMASK_MODES = ("real", "magnitude")


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EmbeddingConfig:
    embed_dim: int = 64
    conv_channels: int = 8
    temporal_kernel: int = 5
    spatial_kernel: int = 7
    spatial_stride: int = 2
    residual_blocks: int = 4
    profile_pool: tuple[int, int] = (4, 4)
    use_audible: bool = True
    use_inaudible: bool = True

    def __post_init__(self):
        object.__setattr__(self, "profile_pool", tuple(self.profile_pool))
        for name in ("embed_dim", "conv_channels", "temporal_kernel", "spatial_stride"):
            if getattr(self, name) < 1:
                raise ConfigError(f"embedding.{name} must be positive")
        if self.spatial_kernel < 1 or self.spatial_kernel % 2 == 0:
            raise ConfigError("embedding.spatial_kernel must be odd")
        if self.residual_blocks < 0:
            raise ConfigError("embedding.residual_blocks must be >= 0")
        if len(self.profile_pool) != 2 or min(self.profile_pool) < 1:
            raise ConfigError("embedding.profile_pool must be two positive sizes")


@dataclass(frozen=True)
class AoAHeadConfig:
    lstm_hidden: int = 32
    dense_hidden: int = 16

    def __post_init__(self):
        if self.lstm_hidden < 1 or self.dense_hidden < 1:
            raise ConfigError("aoa_head sizes must be positive")


@dataclass(frozen=True)
class SeparatorConfig:
    tcn_blocks: int = 4
    convs_per_block: int = 4
    channels: int = 32
    hidden_channels: int = 64
    spatial_channels: int = 16
    kernel_size: int = 3
    dilation_base: int = 2
    lookahead_frames: int = 9
    noncausal_layers_per_block: int = 2
    mask_type: str = "complex-ratio"
    conditioning: str = "embedding"
    premask_mode: str = "real"

    def __post_init__(self):
        for name in ("tcn_blocks", "convs_per_block", "channels", "hidden_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"separator.{name} must be positive")
        if self.spatial_channels < 1 or self.kernel_size < 2:
            raise ConfigError("separator.spatial_channels/kernel_size too small")
        if self.dilation_base < 1:
            raise ConfigError("separator.dilation_base must be positive")
        if self.lookahead_frames < 0:
            raise ConfigError("separator.lookahead_frames must be >= 0")
        if not 0 <= self.noncausal_layers_per_block <= self.convs_per_block:
            raise ConfigError(
                "separator.noncausal_layers_per_block must lie in "
                "[0, separator.convs_per_block]"
            )
        if self.mask_type != "complex-ratio":
            raise ConfigError(f"unsupported separator.mask_type '{self.mask_type}'")
        if self.conditioning not in CONDITIONINGS:
            raise ConfigError(f"unknown separator.conditioning '{self.conditioning}'")
        if self.premask_mode not in PREMASK_MODES:
            raise ConfigError(f"unknown separator.premask_mode '{self.premask_mode}'")
        self.layer_lookaheads()

    @property
    def layer_count(self) -> int:
        return self.tcn_blocks * self.convs_per_block

    def dilations(self) -> list[int]:
        per_block = [self.dilation_base**j for j in range(self.convs_per_block)]
        return per_block * self.tcn_blocks

    def layer_lookaheads(self) -> list[int]:
        """
        Split `lookahead_frames` over the non-causal layers.

        The first pass gives each non-causal layer up to half its kernel
        span (a centred kernel) in block order; the second pass fills the
        remainder up to the full span. Causal layers get 0.
        """
        spans = [d * (self.kernel_size - 1) for d in self.dilations()]
        noncausal = [
            b * self.convs_per_block + j
            for b in range(self.tcn_blocks)
            for j in range(self.noncausal_layers_per_block)
        ]
        shares = [0] * self.layer_count
        remaining = self.lookahead_frames
        for limit in (lambda i: spans[i] // 2, lambda i: spans[i]):
            for i in noncausal:
                extra = min(limit(i) - shares[i], remaining)
                if extra > 0:
                    shares[i] += extra
                    remaining -= extra
        if remaining:
            raise ConfigError(
                f"separator.lookahead_frames={self.lookahead_frames} exceeds what "
                f"the non-causal layers can hold ({self.lookahead_frames - remaining})"
            )
        return shares


@dataclass(frozen=True)
class ModelConfig:
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    aoa_head: AoAHeadConfig = field(default_factory=AoAHeadConfig)
    separator: SeparatorConfig = field(default_factory=SeparatorConfig)

    @property
    def uses_embeddings(self) -> bool:
        return self.separator.conditioning == "embedding"

    def as_dict(self) -> dict[str, Any]:
        return {
            "embedding": asdict(self.embedding),
            "aoa_head": asdict(self.aoa_head),
            "separator": asdict(self.separator),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ModelConfig":
        try:
            return cls(
                EmbeddingConfig(**data["embedding"]),
                AoAHeadConfig(**data["aoa_head"]),
                SeparatorConfig(**data["separator"]),
            )
        except (KeyError, TypeError) as err:
            message = f"model manifest is incomplete: {err}"
            raise CheckpointVersionError(message) from err


# --------------------------------------------------------------------------
# Inputs
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PreMask:
    """Per TF bin alignment score in [-1, 1], [freq, frame]."""

    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ShapeError("PreMask", self.values.shape)


def pool_profile(values: np.ndarray, pool: tuple[int, int]) -> np.ndarray:
    """Block-average a 2D profile; edges are padded by replication."""
    ph, pw = pool
    rows, cols = values.shape
    padded = np.pad(values, ((0, -rows % ph), (0, -cols % pw)), mode="edge")
    return padded.reshape(padded.shape[0] // ph, ph, -1, pw).mean(axis=(1, 3))


def pooled_shape(shape: tuple[int, int], pool: tuple[int, int]) -> tuple[int, int]:
    return -(-shape[0] // pool[0]), -(-shape[1] // pool[1])


def hold_index(first_frames: np.ndarray, frames: int) -> np.ndarray:
    """
    Index of the most recent profile usable at each frame, -1 before the
    first one. `first_frames` must be non-decreasing.
    """
    return np.searchsorted(first_frames, np.arange(frames), side="right") - 1


def unit_ratios(spec: ComplexSpectrogram, reference: int = 0) -> np.ndarray:
    """
    Unit-modulus Y_k / Y_ref for every non-reference mic, [M-1, F, T].

    Bins where |Y_ref| < 1e-10 (or Y_k = 0) are set to 0.
    """
    bins = spec.bins
    ref = bins[reference]
    others = np.delete(bins, reference, axis=0)
    product = others * ref.conj()
    magnitude = np.abs(product)
    valid = (np.abs(ref) >= PREMASK_GUARD)[None] & (magnitude > 0)
    return np.where(valid, product / np.where(valid, magnitude, 1.0), 0.0)


def compute_premask(
    spec: ComplexSpectrogram,
    steering: np.ndarray,
    mode: str = "real",
    reference: int = 0,
) -> PreMask:
    """
    Alignment between observed inter-mic phase and a steering hypothesis.

    `steering` is [M, F] for one direction or [M, F, T] for a per-frame
    track. In "real" mode each bin is Re(sum_k conj(a_k) u_k) / (M - 1),
    which equals the cosine of the phase error when M = 2; "magnitude"
    takes the modulus of the same sum instead.
    """
    M = spec.channel_count
    if M < 2:
        raise ShapeError("compute_premask", spec.bins.shape)
    if steering.shape[:2] != (M, spec.freq_bins):
        raise ShapeError("compute_premask", spec.bins.shape, steering.shape)
    a = np.delete(steering, reference, axis=0)
    if a.ndim == 2:
        a = a[..., None]
    total = np.sum(a.conj() * unit_ratios(spec, reference), axis=0)
    match mode:
        case "real":
            values = total.real / (M - 1)
        case "magnitude":
            values = np.abs(total) / (M - 1)
        case _:
            raise ConfigError(f"unknown premask mode '{mode}'")
    return PreMask(np.clip(values, -1.0, 1.0))


def _geometry_terms(
    geometry: ArrayGeometry, freqs: np.ndarray, reference: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Phase per (mic, freq) for a unit cos / sin of the azimuth, [M-1, F] each."""
    relative = geometry.positions - geometry.positions[reference]
    relative = np.delete(relative, reference, axis=0)
    wavenumber = 2 * np.pi * freqs / SPEED_OF_SOUND
    along = np.outer(relative @ geometry.axis, wavenumber)
    across = np.outer(relative @ geometry.broadside, wavenumber)
    return along, across


def track_steering(
    geometry: ArrayGeometry, freqs: np.ndarray, azimuths_deg: np.ndarray
) -> np.ndarray:
    """Far-field steering for a per-frame azimuth track, [M, F, T]."""
    along, across = _geometry_terms(geometry, freqs)
    theta = np.deg2rad(np.asarray(azimuths_deg, dtype=float))
    phase = along[..., None] * np.cos(theta) + across[..., None] * np.sin(theta)
    ones = np.ones((1,) + phase.shape)
    return np.concatenate([ones, np.exp(1j * phase)], axis=0)


@dataclass(frozen=True, eq=False)
class SeparatorInputs:
    """
    Everything the separator consumes for one clip.

    Profile sequences are pooled [P, H, W] stacks paired with the first
    STFT frame at which each profile is available.
    """

    reference: np.ndarray  # [F, T] complex, reference mic
    lps: np.ndarray  # [F, T]
    ratios: np.ndarray  # [M-1, F, T] complex unit ratios
    stft: StftConfig
    length: int
    fixed_premask: np.ndarray | None = None  # [F, T], "aoa" conditioning
    audible: np.ndarray | None = None
    audible_frames: np.ndarray | None = None
    inaudible: np.ndarray | None = None
    inaudible_frames: np.ndarray | None = None

    def __post_init__(self):
        F, frames = self.reference.shape
        if self.lps.shape != (F, frames) or self.ratios.shape[1:] != (F, frames):
            raise ShapeError(
                "SeparatorInputs",
                self.reference.shape,
                self.lps.shape,
                self.ratios.shape,
            )
        premask = self.fixed_premask
        if premask is not None and premask.shape != (F, frames):
            raise ShapeError("SeparatorInputs", self.reference.shape, premask.shape)

    @property
    def frames(self) -> int:
        return self.reference.shape[1]

    @property
    def freq_bins(self) -> int:
        return self.reference.shape[0]


# --------------------------------------------------------------------------
# Modules
# --------------------------------------------------------------------------


class _Module:
    """Named parameters living in a store shared by the whole model."""

    def __init__(self, store: dict[str, Tensor], prefix: str, rng: np.random.Generator):
        self._store = store
        self._prefix = prefix
        self._rng = rng

    def _add(
        self,
        name: str,
        shape: tuple[int, ...],
        fan_in: int | None = None,
        value: float = 0.0,
    ) -> None:
        full = f"{self._prefix}.{name}"
        if fan_in is None:
            data = np.full(shape, value, dtype=T.current_precision())
        else:
            data = T.uniform_init(self._rng, shape, fan_in)
        self._store[full] = Tensor(data, requires_grad=True, name=full)

    def p(self, name: str) -> Tensor:
        return self._store[f"{self._prefix}.{name}"]

    def arr(self, name: str) -> np.ndarray:
        return self._store[f"{self._prefix}.{name}"].data


class ProfileEmbedder(_Module):
    """
    Pooled profiles [P, H, W] -> embeddings [P, embed_dim].

    A causal 3D convolution over the last `temporal_kernel` profiles
    (strided in both profile axes), batch-norm in its inference form,
    ReLU, then residual blocks of two 3x3 convolutions, a spatial mean
    and a dense projection.
    """

    def __init__(self, store, prefix, config: EmbeddingConfig, rng):
        super().__init__(store, prefix, rng)
        self.config = config
        C, kt, ks = config.conv_channels, config.temporal_kernel, config.spatial_kernel
        self._add("conv.w", (C, 1, kt, ks, ks), fan_in=kt * ks * ks)
        self._add("conv.b", (C,))
        self._add("bn.gain", (C,), value=1.0)
        self._add("bn.offset", (C,))
        for i in range(config.residual_blocks):
            for part in ("a", "b"):
                self._add(f"res{i}.{part}.w", (C, C, 1, 3, 3), fan_in=C * 9)
                self._add(f"res{i}.{part}.b", (C,))
                self._add(f"res{i}.{part}.gain", (C,), value=1.0)
                self._add(f"res{i}.{part}.offset", (C,))
        self._add("proj.w", (C, config.embed_dim), fan_in=C)
        self._add("proj.b", (config.embed_dim,))

    def _trunk(self, x: Tensor, temporal_pad: int) -> Tensor:
        cfg = self.config
        half = cfg.spatial_kernel // 2
        stride = (1, cfg.spatial_stride, cfg.spatial_stride)
        pad = ((temporal_pad, 0), (half, half), (half, half))
        h = T.conv3d(x, self.p("conv.w"), self.p("conv.b"), stride, pad)
        h = T.relu(T.channel_affine(h, self.p("bn.gain"), self.p("bn.offset")))
        same = ((0, 0), (1, 1), (1, 1))
        for i in range(cfg.residual_blocks):
            y = h
            for part in ("a", "b"):
                key = f"res{i}.{part}"
                y = T.conv3d(y, self.p(f"{key}.w"), self.p(f"{key}.b"), padding=same)
                y = T.channel_affine(y, self.p(f"{key}.gain"), self.p(f"{key}.offset"))
                if part == "a":
                    y = T.relu(y)
            h = T.relu(T.add(h, y))
        features = T.transpose(T.mean(h, axis=(2, 3)), (1, 0))
        return T.dense(features, self.p("proj.w"), self.p("proj.b"))

    def forward(self, pooled: np.ndarray) -> Tensor:
        if len(pooled) == 0:
            return Tensor(np.zeros((0, self.config.embed_dim)))
        x = Tensor(np.asarray(pooled, dtype=T.current_precision())[np.newaxis])
        return self._trunk(x, self.config.temporal_kernel - 1)

    def embed_latest(self, window: np.ndarray) -> np.ndarray:
        """
        Embedding of the newest profile in `window` [<= temporal_kernel, H, W],
        matching `forward` at that position.
        """
        kt = self.config.temporal_kernel
        missing = kt - len(window)
        padded = np.pad(window, ((missing, 0), (0, 0), (0, 0))) if missing else window
        x = Tensor(np.asarray(padded, dtype=T.current_precision())[np.newaxis])
        return self._trunk(x, 0).data[0]


class AoAHead(_Module):
    """Per-frame azimuth from embeddings [T, D] -> [T] degrees in [0, 180]."""

    def __init__(self, store, prefix, config: AoAHeadConfig, input_dim: int, rng):
        super().__init__(store, prefix, rng)
        self.config = config
        H, D = config.lstm_hidden, config.dense_hidden
        self._add("lstm.w_input", (input_dim, 4 * H), fan_in=H)
        self._add("lstm.w_hidden", (H, 4 * H), fan_in=H)
        self._add("lstm.bias", (4 * H,), fan_in=H)
        self._add("fc1.w", (H, D), fan_in=H)
        self._add("fc1.b", (D,))
        self._add("fc2.w", (D, 1), fan_in=D)
        self._add("fc2.b", (1,))

    def forward(self, embeddings: Tensor) -> Tensor:
        frames = embeddings.shape[0]
        H = self.config.lstm_hidden
        if frames == 0:
            return Tensor(np.zeros(0))
        h = Tensor(np.zeros(H, dtype=embeddings.data.dtype))
        c = Tensor(np.zeros(H, dtype=embeddings.data.dtype))
        states = []
        for t in range(frames):
            h, c = T.lstm_cell(
                embeddings[t],
                h,
                c,
                self.p("lstm.w_input"),
                self.p("lstm.w_hidden"),
                self.p("lstm.bias"),
            )
            states.append(T.reshape(h, (1, H)))
        hidden = T.relu(T.dense(T.concat(states, 0), self.p("fc1.w"), self.p("fc1.b")))
        z = T.reshape(T.dense(hidden, self.p("fc2.w"), self.p("fc2.b")), (frames,))
        return T.clamp(T.shift(T.scale(z, 90.0), 90.0), 0.0, 180.0)

    def step(
        self, x: np.ndarray, state: tuple[np.ndarray, np.ndarray]
    ) -> tuple[float, tuple[np.ndarray, np.ndarray]]:
        """One frame of `forward` in plain numpy."""
        H = self.config.lstm_hidden
        h, c = state
        gates = (x @ self.arr("lstm.w_input") + self.arr("lstm.bias")) + h @ self.arr(
            "lstm.w_hidden"
        )
        i, f, g, o = (gates[k * H : (k + 1) * H] for k in range(4))
        c = _sigmoid(f) * c + _sigmoid(i) * np.tanh(g)
        h = _sigmoid(o) * np.tanh(c)
        hidden = np.maximum(h @ self.arr("fc1.w") + self.arr("fc1.b"), 0.0)
        z = float((hidden @ self.arr("fc2.w") + self.arr("fc2.b"))[0])
        return float(np.clip(z * 90.0 + 90.0, 0.0, 180.0)), (h, c)


class LearnedPhase(_Module):
    """
    Phase offsets [M-1, F] added to the geometric steering phase.

    Two 3x3 convolutions read a map of the array's endfire phase per
    (mic, freq). The last layer starts at zero, so an untrained model
    steers purely geometrically.
    """

    def __init__(self, store, prefix, along: np.ndarray, rng):
        super().__init__(store, prefix, rng)
        self._map = np.stack([np.cos(along), np.sin(along)])
        self._add("a.w", (4, 2, 3, 3), fan_in=18)
        self._add("a.b", (4,))
        self._add("b.w", (1, 4, 3, 3))
        self._add("b.b", (1,))

    def forward(self) -> Tensor:
        same = ((1, 1), (1, 1))
        x = Tensor(self._map.astype(T.current_precision()))
        h = T.tanh(T.conv2d(x, self.p("a.w"), self.p("a.b"), padding=same))
        out = T.conv2d(h, self.p("b.w"), self.p("b.b"), padding=same)
        return T.reshape(out, self._map.shape[1:])


class SpatialFeatures(_Module):
    """Embeddings [T, D] -> per-frame feature map [S, T] (1x1 conv, LN, PReLU)."""

    def __init__(self, store, prefix, input_dim: int, channels: int, rng):
        super().__init__(store, prefix, rng)
        self._add("w", (channels, input_dim, 1), fan_in=input_dim)
        self._add("b", (channels,))
        self._add("norm.gain", (channels,), value=1.0)
        self._add("norm.offset", (channels,))
        self._add("act", (channels,), value=PRELU_INIT)

    def forward(self, embeddings: Tensor) -> Tensor:
        h = T.conv1d(T.transpose(embeddings, (1, 0)), self.p("w"), self.p("b"))
        h = T.layer_norm(h, self.p("norm.gain"), self.p("norm.offset"), NORM_EPS)
        return T.prelu(h, self.p("act"))

    def step(self, embedding: np.ndarray) -> np.ndarray:
        h = _pointwise(self.arr("w"), self.arr("b"), embedding)
        h = _layer_norm(h, self.arr("norm.gain"), self.arr("norm.offset"))
        return _prelu(h, self.arr("act"))


class TcnSeparator(_Module):
    """
    Features [in, T] -> complex-ratio mask (real [F, T], imag [F, T]).

    Every TCN layer is 1x1 conv, PReLU, layer-norm, depthwise dilated
    conv, PReLU, layer-norm, 1x1 conv, plus a residual connection. Layers
    with look-ahead r pad r frames on the right and d * (K - 1) - r on
    the left.
    """

    def __init__(self, store, prefix, config: SeparatorConfig, freq_bins, extra, rng):
        super().__init__(store, prefix, rng)
        self.config = config
        self.freq_bins = freq_bins
        self.dilations = config.dilations()
        self.lookaheads = config.layer_lookaheads()
        C, H, K = config.channels, config.hidden_channels, config.kernel_size
        in_features = freq_bins + extra
        self._add("input.w", (C, in_features, 1), fan_in=in_features)
        self._add("input.b", (C,))
        for n in range(config.layer_count):
            key = f"tcn{n}"
            self._add(f"{key}.in.w", (H, C, 1), fan_in=C)
            self._add(f"{key}.in.b", (H,))
            self._add(f"{key}.act1", (H,), value=PRELU_INIT)
            self._add(f"{key}.norm1.gain", (H,), value=1.0)
            self._add(f"{key}.norm1.offset", (H,))
            self._add(f"{key}.dw.w", (H, 1, K), fan_in=K)
            self._add(f"{key}.dw.b", (H,))
            self._add(f"{key}.act2", (H,), value=PRELU_INIT)
            self._add(f"{key}.norm2.gain", (H,), value=1.0)
            self._add(f"{key}.norm2.offset", (H,))
            self._add(f"{key}.out.w", (C, H, 1), fan_in=H)
            self._add(f"{key}.out.b", (C,))
        self._add("output.w", (2 * freq_bins, C, 1), fan_in=C)
        self._add("output.b", (2 * freq_bins,))

    @property
    def lookahead(self) -> int:
        return sum(self.lookaheads)

    def _pre(self, key: str, x: Tensor) -> Tensor:
        h = T.conv1d(x, self.p(f"{key}.in.w"), self.p(f"{key}.in.b"))
        h = T.prelu(h, self.p(f"{key}.act1"))
        return T.layer_norm(
            h, self.p(f"{key}.norm1.gain"), self.p(f"{key}.norm1.offset"), NORM_EPS
        )

    def forward(self, features: Tensor) -> tuple[Tensor, Tensor]:
        K = self.config.kernel_size
        x = T.conv1d(features, self.p("input.w"), self.p("input.b"))
        for n, (d, r) in enumerate(zip(self.dilations, self.lookaheads)):
            key = f"tcn{n}"
            h = self._pre(key, x)
            h = T.conv1d(
                h,
                self.p(f"{key}.dw.w"),
                self.p(f"{key}.dw.b"),
                dilation=d,
                padding=(d * (K - 1) - r, r),
                groups=self.config.hidden_channels,
            )
            h = T.prelu(h, self.p(f"{key}.act2"))
            h = T.layer_norm(
                h, self.p(f"{key}.norm2.gain"), self.p(f"{key}.norm2.offset"), NORM_EPS
            )
            x = T.add(x, T.conv1d(h, self.p(f"{key}.out.w"), self.p(f"{key}.out.b")))
        mask = T.tanh(T.conv1d(x, self.p("output.w"), self.p("output.b")))
        F = self.freq_bins
        return mask[:F], mask[F:]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _prelu(x: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    return np.where(x < 0, alpha * x, x)


def _layer_norm(x: np.ndarray, gain: np.ndarray, offset: np.ndarray) -> np.ndarray:
    centred = x - x.mean()
    return centred / np.sqrt((centred**2).mean() + NORM_EPS) * gain + offset


def _pointwise(w: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    return w[:, :, 0] @ x + b


# --------------------------------------------------------------------------
# Model
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SeparatorOutput:
    mask_real: Tensor
    mask_imag: Tensor
    target_real: Tensor
    target_imag: Tensor
    premask: Tensor | None
    aoa: Tensor | None


class SpatialSeparatorModel:
    """
    Embedders, AoA head, learned phase and TCN separator over one shared
    parameter store.
    """

    def __init__(
        self,
        config: ModelConfig,
        geometry: ArrayGeometry,
        stft: StftConfig,
        audible_shape: tuple[int, int],
        inaudible_shape: tuple[int, int],
        seed: int = 0,
    ):
        self.config = config
        self.geometry = geometry
        self.stft = stft
        self.audible_shape = tuple(audible_shape)
        self.inaudible_shape = tuple(inaudible_shape)
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        F = stft.freq_bins
        self.along, self.across = _geometry_terms(geometry, stft.frequencies)

        sep = config.separator
        extra = 0
        self.audible: ProfileEmbedder | None = None
        self.inaudible: ProfileEmbedder | None = None
        self.aoa_head: AoAHead | None = None
        self.phase: LearnedPhase | None = None
        self.spatial: SpatialFeatures | None = None
        if sep.conditioning != "lps":
            extra += F
        if config.uses_embeddings:
            emb = config.embedding
            self.audible = ProfileEmbedder(self.params, "embed.audible", emb, rng)
            self.inaudible = ProfileEmbedder(self.params, "embed.inaudible", emb, rng)
            self.aoa_head = AoAHead(
                self.params, "aoa", config.aoa_head, self.embedding_dim, rng
            )
            self.phase = LearnedPhase(self.params, "phase", self.along, rng)
            self.spatial = SpatialFeatures(
                self.params, "spatial", self.embedding_dim, sep.spatial_channels, rng
            )
            extra += sep.spatial_channels
        self.separator = TcnSeparator(self.params, "sep", sep, F, extra, rng)
        logger.debug(
            "built %s model with %d parameters",
            sep.conditioning,
            sum(p.data.size for p in self.params.values()),
        )

    @property
    def embedding_dim(self) -> int:
        return 2 * self.config.embedding.embed_dim

    @property
    def lookahead(self) -> int:
        return self.separator.lookahead

    @property
    def pooled_shapes(self) -> tuple[tuple[int, int], tuple[int, int]]:
        pool = self.config.embedding.profile_pool
        return (
            pooled_shape(self.audible_shape, pool),
            pooled_shape(self.inaudible_shape, pool),
        )

    @classmethod
    def identity(cls, *args: Any, **kwargs: Any) -> "SpatialSeparatorModel":
        """A model whose mask is ~1 + 0j everywhere, for debugging."""
        model = cls(*args, **kwargs)
        F = model.stft.freq_bins
        model.params["sep.output.w"].data[...] = 0.0
        model.params["sep.output.b"].data[...] = 0.0
        model.params["sep.output.b"].data[:F] = IDENTITY_BIAS
        return model

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        if state.keys() != self.params.keys():
            missing = sorted(set(self.params) ^ set(state))
            raise CheckpointVersionError(f"parameter names differ: {missing[:4]}")
        for name, array in state.items():
            target = self.params[name]
            if array.shape != target.shape:
                raise CheckpointVersionError(
                    f"parameter {name}: expected {target.shape}, found {array.shape}"
                )
            target.data = np.asarray(array, dtype=target.data.dtype).copy()
            target.grad = None

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    # ---------------------------------------------------------- embeddings

    def embed(self, inputs: SeparatorInputs) -> Tensor:
        """Frame-held embeddings of both streams, [T, 2 * embed_dim]."""
        if self.audible is None or self.inaudible is None:
            raise ConfigError("this model is not conditioned on embeddings")
        cfg = self.config.embedding
        streams = []
        for embedder, enabled, pooled, first in (
            (self.audible, cfg.use_audible, inputs.audible, inputs.audible_frames),
            (
                self.inaudible,
                cfg.use_inaudible,
                inputs.inaudible,
                inputs.inaudible_frames,
            ),
        ):
            if not enabled or pooled is None or first is None or len(pooled) == 0:
                streams.append(Tensor(np.zeros((inputs.frames, cfg.embed_dim))))
                continue
            per_profile = embedder.forward(pooled)
            zero = Tensor(np.zeros((1, cfg.embed_dim), dtype=per_profile.data.dtype))
            table = T.concat([zero, per_profile], 0)
            streams.append(table[hold_index(first, inputs.frames) + 1])
        return T.concat(streams, 1)

    def estimate_aoa(self, embeddings: Tensor) -> Tensor:
        if self.aoa_head is None:
            raise ConfigError("this model has no AoA head")
        return self.aoa_head.forward(embeddings)

    def learned_premask(self, inputs: SeparatorInputs, aoa: Tensor) -> Tensor:
        """Pre-mask steered by the estimated AoA plus the learned phase, [F, T]."""
        assert self.phase is not None
        pairs, F = self.along.shape
        frames = inputs.frames
        shape = (pairs, F, frames)
        dtype = T.current_precision()

        def spread(values: np.ndarray) -> Tensor:
            return Tensor(np.broadcast_to(values[..., None], shape).astype(dtype))

        theta = T.scale(aoa, np.pi / 180.0)
        cos_t = T.broadcast_to(T.reshape(T.cos(theta), (1, 1, frames)), shape)
        sin_t = T.broadcast_to(T.reshape(T.sin(theta), (1, 1, frames)), shape)
        offset = T.broadcast_to(T.reshape(self.phase.forward(), (pairs, F, 1)), shape)
        phase = T.add(
            T.add(T.mul(spread(self.along), cos_t), T.mul(spread(self.across), sin_t)),
            offset,
        )
        ur = Tensor(inputs.ratios.real.astype(dtype))
        ui = Tensor(inputs.ratios.imag.astype(dtype))
        c, s = T.cos(phase), T.sin(phase)
        real = T.mean(T.add(T.mul(c, ur), T.mul(s, ui)), axis=0)
        if self.config.separator.premask_mode == "real":
            return real
        imag = T.mean(T.sub(T.mul(c, ui), T.mul(s, ur)), axis=0)
        power = T.add(T.mul(real, real), T.mul(imag, imag))
        return T.sqrt(T.shift(power, 1e-12))

    # -------------------------------------------------------------- forward

    def forward(self, inputs: SeparatorInputs) -> SeparatorOutput:
        sep = self.config.separator
        F = self.stft.freq_bins
        pairs = self.geometry.mic_count - 1
        if inputs.freq_bins != F or inputs.ratios.shape[0] != pairs:
            raise ShapeError("separate", inputs.reference.shape, inputs.ratios.shape)
        dtype = T.current_precision()
        lps = Tensor((inputs.lps * LPS_SCALE).astype(dtype))
        parts = [lps]
        premask: Tensor | None = None
        aoa: Tensor | None = None
        match sep.conditioning:
            case "aoa":
                if inputs.fixed_premask is None:
                    raise ConfigError("aoa conditioning needs a fixed pre-mask")
                premask = Tensor(inputs.fixed_premask.astype(dtype))
                parts.append(premask)
            case "embedding":
                embeddings = self.embed(inputs)
                aoa = self.estimate_aoa(embeddings)
                premask = self.learned_premask(inputs, aoa)
                assert self.spatial is not None
                parts += [premask, self.spatial.forward(embeddings)]
        mask_real, mask_imag = self.separator.forward(T.concat(parts, 0))

        yr = Tensor(inputs.reference.real.astype(dtype))
        yi = Tensor(inputs.reference.imag.astype(dtype))
        target_real = T.sub(T.mul(mask_real, yr), T.mul(mask_imag, yi))
        target_imag = T.add(T.mul(mask_real, yi), T.mul(mask_imag, yr))
        return SeparatorOutput(
            mask_real, mask_imag, target_real, target_imag, premask, aoa
        )

    # ---------------------------------------------------------- checkpoint

    def manifest(self) -> dict[str, Any]:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "model": self.config.as_dict(),
            "mic_count": self.geometry.mic_count,
            "stft": asdict(self.stft),
            "audible_shape": list(self.audible_shape),
            "inaudible_shape": list(self.inaudible_shape),
        }

    def save(self, path: str | Path, extra: Mapping[str, Any] | None = None) -> None:
        manifest = self.manifest() | dict(extra or {})
        T.save_checkpoint(path, self.state_dict(), manifest)

    @classmethod
    def load(
        cls, path: str | Path, geometry: ArrayGeometry, stft: StftConfig
    ) -> tuple["SpatialSeparatorModel", dict[str, Any]]:
        """Rebuild a model from its checkpoint; mismatches raise a version error."""
        tensors, manifest = T.load_checkpoint(path)
        if manifest.get("format") != MODEL_FORMAT:
            raise CheckpointVersionError(f"{path}: not a separator checkpoint")
        if manifest.get("version") != MODEL_VERSION:
            raise CheckpointVersionError(
                f"{path}: model version {manifest.get('version')}, "
                f"expected {MODEL_VERSION}"
            )
        if manifest.get("mic_count") != geometry.mic_count:
            raise CheckpointVersionError(
                f"{path}: trained for {manifest.get('mic_count')} microphones, "
                f"configured for {geometry.mic_count}"
            )
        if manifest.get("stft") != asdict(stft):
            raise CheckpointVersionError(f"{path}: STFT settings differ from config")
        model = cls(
            ModelConfig.from_dict(manifest["model"]),
            geometry,
            stft,
            tuple(manifest["audible_shape"]),
            tuple(manifest["inaudible_shape"]),
        )
        model.load_state_dict(tensors)
        return model, manifest


def separate(
    model: SpatialSeparatorModel, inputs: SeparatorInputs
) -> tuple[ComplexSpectrogram, np.ndarray | None]:
    """Target spectrogram and per-frame AoA (None without an AoA head)."""
    out = model.forward(inputs)
    bins = out.target_real.data + 1j * out.target_imag.data
    aoa = None if out.aoa is None else np.asarray(out.aoa.data, dtype=float)
    return ComplexSpectrogram(bins[np.newaxis], inputs.stft, inputs.length), aoa


def istft_tensor(real: Tensor, imag: Tensor, config: StftConfig, length: int) -> Tensor:
    """
    Differentiable counterpart of `SST.audio.istft` for one channel.

    The inverse real DFT is written as two matrix products so gradients
    flow through the tape.
    """
    F, frames = real.shape
    win, hop, n = config.win_samples, config.hop_samples, config.fft_size
    dtype = real.data.dtype
    if frames == 0:
        return Tensor(np.zeros(length, dtype=dtype))
    k = np.arange(F)[:, None]
    t = np.arange(win)[None, :]
    weight = np.where((k == 0) | (2 * k == n), 1.0, 2.0) / n
    cos_basis = Tensor((weight * np.cos(2 * np.pi * k * t / n)).astype(dtype))
    sin_basis = Tensor((weight * np.sin(2 * np.pi * k * t / n)).astype(dtype))
    segments = T.sub(
        T.matmul(T.transpose(real, (1, 0)), cos_basis),
        T.matmul(T.transpose(imag, (1, 0)), sin_basis),
    )
    window = config.window()
    segments = T.mul(segments, Tensor(np.tile(window, (frames, 1)).astype(dtype)))
    signal = T.overlap_add(segments, hop)
    covered = signal.shape[0]
    weight_sum = np.zeros(covered)
    for f in range(frames):
        weight_sum[f * hop : f * hop + win] += window**2
    inverse = 1.0 / np.where(weight_sum > 0, weight_sum, 1.0)
    signal = T.mul(signal, Tensor(inverse.astype(dtype)))
    if length <= covered:
        return signal[:length]
    return T.concat([signal, Tensor(np.zeros(length - covered, dtype=dtype))], 0)


# --------------------------------------------------------------------------
# Streaming inference
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FrameInputs:
    """One STFT frame of separator input."""

    reference: np.ndarray  # [F] complex
    lps: np.ndarray  # [F]
    ratios: np.ndarray  # [M-1, F] complex
    embedding: np.ndarray | None = None  # [2 * embed_dim]
    fixed_premask: np.ndarray | None = None  # [F]


@dataclass(frozen=True, eq=False)
class FrameOutput:
    frame_index: int
    spectrum: np.ndarray  # [F] complex
    aoa: float | None


def frame_inputs(
    inputs: SeparatorInputs, frame: int, embedding: np.ndarray | None = None
) -> FrameInputs:
    return FrameInputs(
        inputs.reference[:, frame],
        inputs.lps[:, frame],
        inputs.ratios[:, :, frame],
        embedding,
        None if inputs.fixed_premask is None else inputs.fixed_premask[:, frame],
    )


class _LayerCache:
    """
    History of one TCN layer.

    `window` holds the last d * (K - 1) + 1 normalized activations and
    `pending` the inputs still waiting for their residual sum. A `None`
    input marks the end of the stream and stands for zero activation.
    """

    def __init__(self, layer: int, separator: TcnSeparator):
        self.key = f"tcn{layer}"
        self.sep = separator
        self.dilation = separator.dilations[layer]
        self.lookahead = separator.lookaheads[layer]
        K = separator.config.kernel_size
        H = separator.config.hidden_channels
        self.span = self.dilation * (K - 1) + 1
        self.window = np.zeros((self.span, H))
        self.pending: list[np.ndarray] = []
        self.pushed = 0

    def push(self, x: np.ndarray | None) -> list[np.ndarray | None]:
        s, key = self.sep, self.key
        if x is None:
            h = np.zeros(self.window.shape[1])
        else:
            h = _pointwise(s.arr(f"{key}.in.w"), s.arr(f"{key}.in.b"), x)
            h = _layer_norm(
                _prelu(h, s.arr(f"{key}.act1")),
                s.arr(f"{key}.norm1.gain"),
                s.arr(f"{key}.norm1.offset"),
            )
            self.pending.append(x)
        self.window = np.roll(self.window, -1, axis=0)
        self.window[-1] = h
        self.pushed += 1
        if self.pushed <= self.lookahead:
            return []
        if not self.pending:
            return [None]

        taps = self.window[:: self.dilation]  # oldest first
        y = np.einsum("hk,kh->h", s.arr(f"{key}.dw.w")[:, 0, :], taps)
        y = y + s.arr(f"{key}.dw.b")
        y = _layer_norm(
            _prelu(y, s.arr(f"{key}.act2")),
            s.arr(f"{key}.norm2.gain"),
            s.arr(f"{key}.norm2.offset"),
        )
        residual = self.pending.pop(0)
        return [residual + _pointwise(s.arr(f"{key}.out.w"), s.arr(f"{key}.out.b"), y)]


class StreamingSeparator:
    """
    Frame-by-frame separator with per-layer caches.

    `push(index, frame)` accepts frames in order and returns the outputs
    that became final, each delayed by exactly `lookahead` frames.
    `flush()` ends the stream and returns the remaining frames.
    """

    def __init__(self, model: SpatialSeparatorModel):
        self.model = model
        self.reset()

    @property
    def lookahead(self) -> int:
        return self.model.lookahead

    def reset(self) -> None:
        sep = self.model.separator
        self.layers = [_LayerCache(n, sep) for n in range(sep.config.layer_count)]
        self.next_index = 0
        self.emitted = 0
        self._queue: list[tuple[np.ndarray, float | None]] = []
        H = self.model.config.aoa_head.lstm_hidden
        self._lstm = (np.zeros(H), np.zeros(H))
        phase = self.model.phase
        self._offsets = None if phase is None else phase.forward().data

    def _premask(self, frame: FrameInputs, aoa: float) -> np.ndarray:
        m = self.model
        theta = np.deg2rad(aoa)
        phase = m.along * np.cos(theta) + m.across * np.sin(theta) + self._offsets
        c, s = np.cos(phase), np.sin(phase)
        ur, ui = frame.ratios.real, frame.ratios.imag
        real = (c * ur + s * ui).mean(axis=0)
        if m.config.separator.premask_mode == "real":
            return real
        imag = (c * ui - s * ur).mean(axis=0)
        return np.sqrt(real * real + imag * imag + 1e-12)

    def _features(self, frame: FrameInputs) -> tuple[np.ndarray, float | None]:
        m = self.model
        parts = [frame.lps * LPS_SCALE]
        aoa = None
        match m.config.separator.conditioning:
            case "aoa":
                if frame.fixed_premask is None:
                    raise ConfigError("aoa conditioning needs a fixed pre-mask")
                parts.append(frame.fixed_premask)
            case "embedding":
                assert m.aoa_head is not None and m.spatial is not None
                if frame.embedding is None:
                    raise ConfigError("embedding conditioning needs frame embeddings")
                aoa, self._lstm = m.aoa_head.step(frame.embedding, self._lstm)
                spatial = m.spatial.step(frame.embedding)
                parts += [self._premask(frame, aoa), spatial]
        return np.concatenate(parts), aoa

    def _run(self, item: np.ndarray | None) -> list[FrameOutput]:
        items = [item]
        for layer in self.layers:
            forwarded: list[np.ndarray | None] = []
            for x in items:
                forwarded += layer.push(x)
            items = forwarded
        sep = self.model.separator
        F = sep.freq_bins
        outputs = []
        for x in items:
            if x is None:
                continue
            mask = np.tanh(_pointwise(sep.arr("output.w"), sep.arr("output.b"), x))
            reference, aoa = self._queue.pop(0)
            spectrum = (mask[:F] + 1j * mask[F:]) * reference
            outputs.append(FrameOutput(self.emitted, spectrum, aoa))
            self.emitted += 1
        return outputs

    def push(self, frame_index: int, frame: FrameInputs) -> list[FrameOutput]:
        if frame_index != self.next_index:
            raise SequenceError(
                f"expected frame {self.next_index}, received frame {frame_index}"
            )
        self.next_index += 1
        features, aoa = self._features(frame)
        self._queue.append((frame.reference, aoa))
        sep = self.model.separator
        x = _pointwise(sep.arr("input.w"), sep.arr("input.b"), features)
        return self._run(x)

    def flush(self) -> list[FrameOutput]:
        outputs: list[FrameOutput] = []
        for _ in range(self.lookahead):
            outputs += self._run(None)
        return outputs


def streaming_separate(
    frame_index: int, frame: FrameInputs, cache: StreamingSeparator
) -> tuple[list[FrameOutput], StreamingSeparator]:
    """Functional form of `StreamingSeparator.push`; the cache is updated in place."""
    return cache.push(frame_index, frame), cache
