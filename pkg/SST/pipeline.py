"""
From a 44.1 kHz capture to separator inputs and back to a waveform.

Two front ends exist. The compensated one (zero-phase band split and a
delay-free resampler) keeps every band sample-aligned with the capture
and is what training and offline separation use. The causal one (plain
FIR filtering and the polyphase resampler with its lag) is exactly what
a streaming engine can compute, and is the offline reference for it.
"""

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import signal

from SST.audible import (
    GridConfig,
    MaskProvider,
    MusicProfile,
    audible_profile_sequence,
    profile_peak_aoa,
)
from SST.audio import (
    CAPTURE_RATE,
    RESAMPLE_DOWN,
    RESAMPLE_UP,
    SPEECH_RATE,
    ComplexSpectrogram,
    MultichannelAudio,
    Resampler,
    StftConfig,
    band_split,
    group_delay,
    istft,
    log_power_spectrogram,
    resample_to_16k,
    speech_taps,
    stft,
    tracking_taps,
)
from SST.errors import ConfigError
from SST.inaudible import ChirpConfig, RangeAoAProfile, profile_sequence
from SST.network import (
    SeparatorInputs,
    SpatialSeparatorModel,
    compute_premask,
    pool_profile,
    separate,
    track_steering,
    unit_ratios,
)
from SST.simulate import ArrayGeometry

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class FrontEnd:
    speech: MultichannelAudio  # 16 kHz
    tracking: MultichannelAudio | None  # 44.1 kHz tracking band
    sync_offset_s: float = 0.0


def front_end(audio: MultichannelAudio, compensate: bool = True) -> FrontEnd:
    """
    Speech band at 16 kHz plus the tracking band at the capture rate.

    16 kHz input has no tracking band and is passed through.
    """
    if audio.sample_rate == SPEECH_RATE:
        return FrontEnd(audio, None)
    if audio.sample_rate != CAPTURE_RATE:
        raise ConfigError(f"unsupported capture rate {audio.sample_rate} Hz")
    if compensate:
        speech, tracking = band_split(audio)
        return FrontEnd(resample_to_16k(speech), tracking)

    speech = signal.lfilter(speech_taps(), 1.0, audio.samples, axis=-1)
    tracking = signal.lfilter(tracking_taps(), 1.0, audio.samples, axis=-1)
    resampled = Resampler(audio.channel_count).process(speech)
    return FrontEnd(
        MultichannelAudio(resampled, SPEECH_RATE),
        audio.with_samples(tracking),
        group_delay(tracking_taps()) / CAPTURE_RATE,
    )


def frame_times(config: StftConfig, frames: int) -> np.ndarray:
    """Centre time of each STFT frame in seconds."""
    starts = np.arange(frames) * config.hop_samples
    return (starts + config.win_samples / 2) / config.sample_rate


def capture_sample_of_frame(config: StftConfig, frames: int) -> np.ndarray:
    """Newest capture-rate sample that feeds each 16 kHz STFT frame."""
    last = np.arange(frames) * config.hop_samples + config.win_samples - 1
    return (last * RESAMPLE_DOWN) // RESAMPLE_UP


def first_frame_after_sample(
    config: StftConfig, sample: np.ndarray | int
) -> np.ndarray:
    """
    Smallest frame t with capture_sample_of_frame(t) >= sample, i.e. the
    first STFT frame whose 16 kHz samples arrive no earlier than `sample`.
    """
    samples = np.asarray(sample, dtype=np.int64)
    needed = -((-samples * RESAMPLE_UP) // RESAMPLE_DOWN)  # ceil
    hop, win = config.hop_samples, config.win_samples
    return np.maximum(0, -((win - 1 - needed) // hop))


def inaudible_first_frames(
    profiles: Sequence[RangeAoAProfile], config: StftConfig, frames: int
) -> np.ndarray:
    """
    First STFT frame at which each range-angle profile is complete;
    profiles finishing after the last frame map to `frames`.
    """
    needed = np.array([p.available_sample - 1 for p in profiles], dtype=np.int64)
    return np.minimum(first_frame_after_sample(config, needed), frames)


def stack_profiles(
    profiles: Sequence[MusicProfile | RangeAoAProfile],
    shape: tuple[int, int],
    pool: tuple[int, int],
) -> np.ndarray:
    """Pooled profile stack [P, H, W]; `shape` is the unpooled profile shape."""
    if not profiles:
        empty = pool_profile(np.zeros(shape), pool)
        return np.zeros((0,) + empty.shape)
    return np.stack([pool_profile(p.values, pool) for p in profiles])


def profile_shapes(grid: GridConfig) -> tuple[tuple[int, int], tuple[int, int]]:
    """(audible, inaudible) profile shapes for a grid."""
    angles = len(grid.angle_axis)
    return (len(grid.freq_axis), angles), (len(grid.range_axis), angles)


@dataclass(frozen=True, eq=False)
class ExtractedInputs:
    spec: ComplexSpectrogram
    inputs: SeparatorInputs
    audible: list[MusicProfile]
    inaudible: list[RangeAoAProfile]


def tracking_profiles(
    front: FrontEnd,
    chirp: ChirpConfig,
    geometry: ArrayGeometry,
    grid: GridConfig = GridConfig(),
) -> list[RangeAoAProfile]:
    """Range-angle profiles of the tracking band; none for 16 kHz input."""
    if front.tracking is None:
        return []
    return profile_sequence(
        front.tracking, chirp, geometry, grid, sync_offset_s=front.sync_offset_s
    )


def extract_inputs(
    front: FrontEnd,
    model: SpatialSeparatorModel,
    geometry: ArrayGeometry,
    chirp: ChirpConfig,
    grid: GridConfig = GridConfig(),
    aoa_track: np.ndarray | None = None,
    mask: MaskProvider | None = None,
) -> ExtractedInputs:
    """
    Everything the separator needs from one front-end output.

    `aoa_track` (degrees per STFT frame) feeds the fixed pre-mask of
    AoA-conditioned models. Profiles are only computed when the model
    reads embeddings.
    """
    config = model.stft
    spec = stft(front.speech, config)
    frames = spec.time_frames
    sep = model.config.separator

    fixed = None
    if sep.conditioning == "aoa":
        if aoa_track is None:
            raise ConfigError("AoA-conditioned separation needs an AoA track")
        steering = track_steering(geometry, config.frequencies, aoa_track[:frames])
        fixed = compute_premask(spec, steering, sep.premask_mode).values

    audible: list[MusicProfile] = []
    inaudible: list[RangeAoAProfile] = []
    pool = model.config.embedding.profile_pool
    audible_shape, inaudible_shape = profile_shapes(grid)
    if model.config.uses_embeddings:
        bins = None if mask is None else mask.mask_for(spec)
        audible = audible_profile_sequence(spec, bins, geometry, grid)
        inaudible = tracking_profiles(front, chirp, geometry, grid)

    inputs = SeparatorInputs(
        reference=spec.bins[0],
        lps=log_power_spectrogram(spec, 0),
        ratios=unit_ratios(spec),
        stft=config,
        length=front.speech.frames,
        fixed_premask=fixed,
        audible=stack_profiles(audible, audible_shape, pool),
        audible_frames=np.array([p.frame_index for p in audible], dtype=int),
        inaudible=stack_profiles(inaudible, inaudible_shape, pool),
        inaudible_frames=inaudible_first_frames(inaudible, config, frames),
    )
    logger.debug(
        "extracted %d frames, %d audible and %d inaudible profiles",
        frames,
        len(audible),
        len(inaudible),
    )
    return ExtractedInputs(spec, inputs, audible, inaudible)


def separate_audio(
    audio: MultichannelAudio,
    model: SpatialSeparatorModel,
    geometry: ArrayGeometry,
    chirp: ChirpConfig,
    grid: GridConfig = GridConfig(),
    aoa_track: np.ndarray | None = None,
) -> tuple[MultichannelAudio, np.ndarray | None]:
    """Separate the target talker of a capture; returns 16 kHz mono audio."""
    extracted = extract_inputs(
        front_end(audio), model, geometry, chirp, grid, aoa_track
    )
    target, aoa = separate(model, extracted.inputs)
    return istft(target, model.stft), aoa


# --------------------------------------------------------------------------
# Localization tracks
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class AoATrack:
    """Azimuth estimates of one localization variant; NaN marks no estimate."""

    variant: str
    times: np.ndarray
    azimuths: np.ndarray
    profiles: Sequence[MusicProfile] = ()

    def mean_error(
        self, truth_times: np.ndarray, truth_aoa: np.ndarray
    ) -> float | None:
        valid = ~np.isnan(self.azimuths)
        if not valid.any():
            return None
        truth = np.interp(self.times[valid], truth_times, truth_aoa)
        return float(np.mean(np.abs(self.azimuths[valid] - truth)))


def music_track(
    spec: ComplexSpectrogram,
    geometry: ArrayGeometry,
    grid: GridConfig = GridConfig(),
    mask: MaskProvider | None = None,
    variant: str = "music",
) -> AoATrack:
    """
    Peak azimuth of every audible profile, stamped when it completes.
    The profiles themselves stay on the track for export and plotting.
    """
    bins = None if mask is None else mask.mask_for(spec)
    profiles = audible_profile_sequence(spec, bins, geometry, grid)
    peaks = [profile_peak_aoa(p) for p in profiles]
    return AoATrack(
        variant,
        np.array([p.time_s for p in profiles]),
        np.array([np.nan if a is None else a for a in peaks]),
        profiles,
    )


def model_track(
    front: FrontEnd,
    model: SpatialSeparatorModel,
    geometry: ArrayGeometry,
    chirp: ChirpConfig,
    grid: GridConfig = GridConfig(),
    variant: str = "model",
) -> AoATrack:
    """Per-frame azimuth from a model's embeddings and AoA head."""
    if not model.config.uses_embeddings:
        raise ConfigError(f"{variant}: the model has no AoA head")
    extracted = extract_inputs(front, model, geometry, chirp, grid)
    aoa = model.estimate_aoa(model.embed(extracted.inputs)).data
    return AoATrack(variant, frame_times(model.stft, len(aoa)), np.asarray(aoa))
