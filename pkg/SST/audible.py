"""
Target-talker angle of arrival from the speech band.

Narrowband MUSIC runs on every STFT frequency row between 800 Hz and
4 kHz. Only time-frequency bins where the target dominates (an ideal
binary mask intersected over microphones) contribute snapshots to the
covariance. Rows are stacked into a frequency x angle profile whose
column sums peak at the talker's azimuth.

Steering vectors use the far-field model against the array axis and are
normalized to the reference microphone: a_k = exp(j 2 pi f tau_k), where
tau_k is how much earlier the wavefront reaches microphone k than the
reference. This matches the phase of Y_k / Y_ref for a source at that
azimuth under the STFT sign convention used in `SST.audio`.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from SST.audio import ComplexSpectrogram
from SST.errors import ConfigError, NumericError, ShapeError
from SST.simulate import SPEED_OF_SOUND, ArrayGeometry

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GridConfig:
    """Profile axes and MUSIC parameters shared by both sensing paths."""

    freq_min_hz: float = 800.0
    freq_max_hz: float = 4000.0
    freq_points: int = 103
    angle_step_deg: float = 1.0
    range_min_m: float = 0.2
    range_max_m: float = 1.0
    range_step_m: float = 0.02
    update_s: float = 0.3
    signal_dim: int = 1
    diagonal_loading: float = 1e-6

    def __post_init__(self):
        if not 0 < self.freq_min_hz < self.freq_max_hz:
            raise ConfigError("grids.freq_min_hz must be below grids.freq_max_hz")
        if self.freq_points < 1:
            raise ConfigError("grids.freq_points must be positive")
        if not 0 < self.angle_step_deg <= 180:
            raise ConfigError("grids.angle_step_deg must lie in (0, 180]")
        if not 0 < self.range_min_m < self.range_max_m or self.range_step_m <= 0:
            raise ConfigError("grids range axis is empty")
        if self.update_s <= 0:
            raise ConfigError("grids.update_s must be positive")
        if self.signal_dim < 1:
            raise ConfigError("grids.signal_dim must be >= 1")
        if self.diagonal_loading < 0:
            raise ConfigError("grids.diagonal_loading must be >= 0")

    @cached_property
    def angle_axis(self) -> np.ndarray:
        count = int(round(180.0 / self.angle_step_deg)) + 1
        return np.linspace(0.0, 180.0, count)

    @cached_property
    def freq_axis(self) -> np.ndarray:
        return np.linspace(self.freq_min_hz, self.freq_max_hz, self.freq_points)

    @cached_property
    def range_axis(self) -> np.ndarray:
        count = int(round((self.range_max_m - self.range_min_m) / self.range_step_m))
        return self.range_min_m + self.range_step_m * np.arange(count + 1)

    def freq_rows(self, freq_resolution: float) -> np.ndarray:
        """STFT bin index feeding each row of the frequency axis."""
        return np.round(self.freq_axis / freq_resolution).astype(int)


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Target-dominance indicator per [freq, frame] bin."""

    mask: np.ndarray

    def __post_init__(self):
        data = np.array(self.mask, dtype=bool)
        if data.ndim != 2:
            raise ShapeError("BinaryMask", data.shape)
        data.flags.writeable = False
        object.__setattr__(self, "mask", data)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mask.shape

    @classmethod
    def ones(cls, freq_bins: int, frames: int) -> "BinaryMask":
        return cls(np.ones((freq_bins, frames), dtype=bool))


@dataclass(frozen=True, eq=False)
class CovarianceMatrix:
    R: np.ndarray
    snapshot_count: int


@dataclass(frozen=True, eq=False)
class NoiseSubspace:
    basis: np.ndarray  # [M, M - signal_dim]
    signal_dim: int
    eigenvalues: np.ndarray  # ascending


@dataclass(frozen=True, eq=False)
class MusicProfile:
    """Frequency x angle MUSIC profile, each non-empty row max-normalized."""

    values: np.ndarray
    freq_axis: np.ndarray
    angle_axis: np.ndarray
    time_s: float = 0.0
    frame_index: int = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def is_empty(self) -> bool:
        return not np.any(self.values)


# --------------------------------------------------------------------------
# Masks
# --------------------------------------------------------------------------


def oracle_ibm(
    target_spec: ComplexSpectrogram, residual_spec: ComplexSpectrogram, channel: int
) -> BinaryMask:
    """
    Ideal binary mask of one channel: 1 where |target| > |residual|.

    Ties go to the residual, so equal magnitudes (including two silent
    bins) give 0.
    """
    if target_spec.bins.shape != residual_spec.bins.shape:
        raise ConfigError(
            f"oracle_ibm: target {target_spec.bins.shape} and residual "
            f"{residual_spec.bins.shape} differ in shape"
        )
    target = np.abs(target_spec.bins[channel])
    residual = np.abs(residual_spec.bins[channel])
    return BinaryMask(target > residual)


def intersect_masks(per_mic_masks: Sequence[BinaryMask]) -> BinaryMask:
    """A bin is kept only when every microphone's mask keeps it."""
    if not per_mic_masks:
        raise ConfigError("intersect_masks needs at least one mask")
    shapes = {m.shape for m in per_mic_masks}
    if len(shapes) != 1:
        raise ShapeError("intersect_masks", *sorted(shapes))
    return BinaryMask(np.logical_and.reduce([m.mask for m in per_mic_masks]))


class MaskProvider(ABC):
    """Source of the bin-selection mask for a speech-band spectrogram."""

    name: str

    @abstractmethod
    def mask_for(self, spec: ComplexSpectrogram) -> BinaryMask:
        raise NotImplementedError


class OracleMask(MaskProvider):
    """Ideal binary mask from simulator components, ANDed across mics."""

    name = "oracle"

    def __init__(
        self, target_spec: ComplexSpectrogram, residual_spec: ComplexSpectrogram
    ):
        self.target_spec = target_spec
        self.residual_spec = residual_spec

    def mask_for(self, spec: ComplexSpectrogram) -> BinaryMask:
        masks = [
            oracle_ibm(self.target_spec, self.residual_spec, ch)
            for ch in range(self.target_spec.channel_count)
        ]
        mask = intersect_masks(masks)
        if mask.shape != spec.bins.shape[1:]:
            raise ConfigError("oracle mask does not match the mixture spectrogram")
        return mask


class AllPassMask(MaskProvider):
    """Keeps every bin; turns masked MUSIC into plain wideband MUSIC."""

    name = "all-pass"

    def mask_for(self, spec: ComplexSpectrogram) -> BinaryMask:
        return BinaryMask.ones(spec.freq_bins, spec.time_frames)


# --------------------------------------------------------------------------
# Covariance and MUSIC
# --------------------------------------------------------------------------


def bin_covariance(
    spec: ComplexSpectrogram,
    freq_bin: int,
    frames: slice | np.ndarray,
    mask: BinaryMask | None = None,
    diagonal_loading: float = 1e-6,
) -> CovarianceMatrix | None:
    """
    Average x(t) x(t)^H over masked frames of one frequency bin.

    Loading of `diagonal_loading * trace(R) / M` is added to the
    diagonal. Returns None when no frame in the window is masked in.
    """
    snapshots = spec.bins[:, freq_bin, frames]
    if mask is not None:
        snapshots = snapshots[:, mask.mask[freq_bin, frames]]
    count = snapshots.shape[1]
    if count == 0:
        return None
    M = snapshots.shape[0]
    R = snapshots @ snapshots.conj().T / count
    if diagonal_loading:
        R = R + diagonal_loading * np.trace(R).real / M * np.eye(M)
    return CovarianceMatrix(R, count)


def steering_matrix(
    geometry: ArrayGeometry,
    azimuths_deg: np.ndarray,
    freq_hz: float,
    speed_of_sound: float = SPEED_OF_SOUND,
) -> np.ndarray:
    """
    Far-field steering vectors, [angles, mics], reference entry 1.

    Entries are exp(+j 2 pi f advance) where `advance` is how much earlier
    the wavefront reaches a mic than the reference. That is the familiar
    exp(-j 2 pi f tau) with tau = -advance, matching `numpy.fft` signs.
    """
    theta = np.deg2rad(np.atleast_1d(azimuths_deg))
    cos, sin = np.cos(theta)[:, None], np.sin(theta)[:, None]
    directions = cos * geometry.axis + sin * geometry.broadside
    relative = geometry.positions - geometry.positions[geometry.reference_index]
    advance = directions @ relative.T / speed_of_sound
    return np.exp(2j * np.pi * freq_hz * advance)


def steering_vector(
    geometry: ArrayGeometry,
    azimuth_deg: float,
    freq_hz: float,
    speed_of_sound: float = SPEED_OF_SOUND,
) -> np.ndarray:
    angles = np.array([azimuth_deg])
    return steering_matrix(geometry, angles, freq_hz, speed_of_sound)[0]


def noise_subspace(R: np.ndarray, signal_dim: int) -> NoiseSubspace:
    """Eigenvectors of the M - signal_dim smallest eigenvalues of R."""
    M = R.shape[-1]
    if not 1 <= signal_dim < M:
        raise ConfigError(f"signal_dim must lie in [1, {M - 1}], got {signal_dim}")
    if not np.all(np.isfinite(R)):
        raise NumericError("covariance has non-finite entries")
    try:
        eigenvalues, eigenvectors = np.linalg.eigh(R)
    except np.linalg.LinAlgError as err:
        cond = np.linalg.cond(R)
        logger.error("eigendecomposition failed, condition number %.3g", cond)
        raise NumericError("eigendecomposition failed", condition=cond) from err
    return NoiseSubspace(eigenvectors[..., : M - signal_dim], signal_dim, eigenvalues)


def _pseudo_spectrum(basis: np.ndarray, steering: np.ndarray) -> np.ndarray:
    # basis [..., M, K], steering [..., A, M]
    projected = steering.conj() @ basis
    power = np.sum(np.abs(projected) ** 2, axis=-1)
    spectrum = 1.0 / np.maximum(power, np.finfo(float).tiny)
    return spectrum / spectrum.max(axis=-1, keepdims=True)


def music_spectrum(
    R: np.ndarray,
    geometry: ArrayGeometry,
    freq_hz: float,
    signal_dim: int = 1,
    angles: np.ndarray | None = None,
) -> np.ndarray:
    """
    MUSIC pseudo-spectrum p(theta) = 1 / |E_n^H a(theta)|^2, max = 1.

    Raises
    ------
    NumericError
        The covariance is non-finite or the eigensolver fails.
    """
    angles = GridConfig().angle_axis if angles is None else angles
    subspace = noise_subspace(np.asarray(R), signal_dim)
    return _pseudo_spectrum(subspace.basis, steering_matrix(geometry, angles, freq_hz))


def music_spectra(
    Rs: np.ndarray,
    geometry: ArrayGeometry,
    freqs_hz: np.ndarray,
    signal_dim: int = 1,
    angles: np.ndarray | None = None,
) -> np.ndarray:
    """Batched `music_spectrum` over a stack of covariances, [F, angles]."""
    angles = GridConfig().angle_axis if angles is None else angles
    if len(Rs) == 0:
        return np.zeros((0, len(angles)))
    subspace = noise_subspace(np.asarray(Rs), signal_dim)
    steering = np.stack([steering_matrix(geometry, angles, f) for f in freqs_hz])
    return _pseudo_spectrum(subspace.basis, steering)


def masked_music_profile(
    spec: ComplexSpectrogram,
    mask: BinaryMask | None,
    geometry: ArrayGeometry,
    frames: slice | None = None,
    grid: GridConfig = GridConfig(),
) -> MusicProfile:
    """
    Stack per-row MUSIC spectra over the frequency axis of `grid`.

    Rows whose STFT bin has no masked frame in the window stay zero. A
    mask of None keeps every bin.
    """
    frames = slice(None) if frames is None else frames
    rows = grid.freq_rows(spec.freq_resolution)
    if rows.max() >= spec.freq_bins:
        raise ConfigError("profile frequency axis exceeds the spectrogram band")

    values = np.zeros((len(rows), len(grid.angle_axis)))
    filled, covariances = [], []
    for i, b in enumerate(rows):
        cov = bin_covariance(spec, b, frames, mask, grid.diagonal_loading)
        if cov is not None:
            filled.append(i)
            covariances.append(cov.R)

    if filled:
        freqs = rows[filled] * spec.freq_resolution
        values[filled] = music_spectra(
            np.stack(covariances), geometry, freqs, grid.signal_dim, grid.angle_axis
        )
    return MusicProfile(values, grid.freq_axis, grid.angle_axis)


def profile_peak_aoa(profile: MusicProfile) -> float | None:
    """
    Azimuth of the largest column sum; the smaller angle wins ties.

    Returns None for an all-zero profile.
    """
    if profile.is_empty:
        return None
    totals = profile.values.sum(axis=0)
    return float(profile.angle_axis[int(np.argmax(totals))])


def audible_profile_sequence(
    spec: ComplexSpectrogram,
    mask: BinaryMask | None,
    geometry: ArrayGeometry,
    grid: GridConfig = GridConfig(),
) -> list[MusicProfile]:
    """
    One profile per `grid.update_s` of frames, over the frames of that
    update window. Each profile is stamped with the time its last frame
    completes.
    """
    window = max(1, int(round(grid.update_s / spec.hop)))
    profiles = []
    for k in range(spec.time_frames // window):
        last = (k + 1) * window - 1
        profile = masked_music_profile(
            spec, mask, geometry, slice(k * window, last + 1), grid
        )
        available = last * spec.hop + spec.window_len
        profiles.append(
            MusicProfile(
                profile.values,
                profile.freq_axis,
                profile.angle_axis,
                time_s=available,
                frame_index=last,
            )
        )
    logger.debug("computed %d audible profiles", len(profiles))
    return profiles
