"""Minimum-variance distortionless-response beamforming in the STFT domain."""

import numpy as np

from SST.audible import steering_vector
from SST.audio import ComplexSpectrogram
from SST.errors import ShapeError
from SST.simulate import ArrayGeometry


def spatial_covariance(spec: ComplexSpectrogram) -> np.ndarray:
    """Per-frequency covariance averaged over all frames, [F, M, M]."""
    frames = max(spec.time_frames, 1)
    return np.einsum("mft,nft->fmn", spec.bins, spec.bins.conj()) / frames


def mvdr_weights(
    covariance: np.ndarray, steering: np.ndarray, diagonal_loading: float = 1e-6
) -> np.ndarray:
    """
    w = Phi^-1 v / (v^H Phi^-1 v), batched over leading axes.

    `covariance` is [..., M, M] and `steering` [..., M]. The weights
    satisfy w^H v = 1.
    """
    if covariance.shape[:-1] != steering.shape:
        raise ShapeError("mvdr_weights", covariance.shape, steering.shape)
    M = covariance.shape[-1]
    trace = np.trace(covariance, axis1=-2, axis2=-1).real
    loading = diagonal_loading * np.maximum(trace, np.finfo(float).eps) / M
    loaded = covariance + loading[..., None, None] * np.eye(M)
    numerator = np.linalg.solve(loaded, steering[..., None])[..., 0]
    denominator = np.einsum("...m,...m->...", steering.conj(), numerator)
    return numerator / denominator[..., None]


def mvdr_beamform(
    spec: ComplexSpectrogram,
    geometry: ArrayGeometry,
    azimuth_deg: float,
    noise_spec: ComplexSpectrogram | None = None,
    diagonal_loading: float = 1e-6,
) -> ComplexSpectrogram:
    """
    Single-channel MVDR output w^H Y(t, f) steered at `azimuth_deg`.

    The covariance comes from `noise_spec` when given (interference plus
    noise only), otherwise from the mixture itself.
    """
    if spec.channel_count != geometry.mic_count:
        raise ShapeError("mvdr_beamform", spec.bins.shape, (geometry.mic_count,))
    source = spec if noise_spec is None else noise_spec
    if source.bins.shape[:2] != spec.bins.shape[:2]:
        raise ShapeError("mvdr_beamform", spec.bins.shape, source.bins.shape)

    freqs = spec.config.frequencies
    steering = np.stack([steering_vector(geometry, azimuth_deg, f) for f in freqs])
    weights = mvdr_weights(spatial_covariance(source), steering, diagonal_loading)
    output = np.einsum("fm,mft->ft", weights.conj(), spec.bins)
    return ComplexSpectrogram(output[np.newaxis], spec.config, spec.length)
