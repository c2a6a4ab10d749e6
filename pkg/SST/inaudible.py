"""
FMCW sensing in the 18-20 kHz tracking band.

The device speakers play a periodic linear chirp. Every received echo is
a delayed copy; multiplying by the transmitted chirp turns each path
delay t_d into a constant beat tone at B * t_d / T. Stacking the beat
signals of all microphones gives one snapshot per chirp period, and a
two-dimensional MUSIC search over (range, azimuth) hypotheses turns it
into a range-angle profile.

Range hypotheses are near-field: for a point at distance d and azimuth
theta from the array centroid, each microphone's delay is
(|speaker - point| + |point - mic|) / c with the true positions.
"""

import logging
from dataclasses import dataclass, replace
from functools import lru_cache
from math import ceil
from typing import Final, Sequence

import numpy as np

from SST.audible import GridConfig
from SST.audio import CAPTURE_RATE, MultichannelAudio
from SST.errors import ConfigError, NumericError, SyncError
from SST.simulate import SPEED_OF_SOUND, ArrayGeometry, Point, as_point

logger = logging.getLogger(__name__)

BEAT_PASS_HZ: Final[float] = 400.0
BEAT_STOP_HZ: Final[float] = 600.0
DECIMATION: Final[int] = 32
HANKEL_LAGS: Final[int] = 24
LEAD_GUARD_S: Final[float] = 0.008
TAIL_GUARD_S: Final[float] = 0.002
FMCW_SIGNAL_DIM: Final[int] = 2


@dataclass(frozen=True)
class ChirpConfig:
    """Periodic up-chirp played by one or more device speakers."""

    f_min: float = 18000.0
    f_max: float = 20000.0
    period_s: float = 0.040
    sample_rate: int = CAPTURE_RATE
    speaker_offsets: tuple[float, ...] = (0.0, 0.020)
    speaker_positions: tuple[Point, ...] = ((1.90, 1.0, 1.0), (2.18, 1.0, 1.0))
    speed_of_sound: float = SPEED_OF_SOUND

    def __post_init__(self):
        object.__setattr__(
            self, "speaker_offsets", tuple(float(o) for o in self.speaker_offsets)
        )
        positions = tuple(as_point(p) for p in self.speaker_positions)
        object.__setattr__(self, "speaker_positions", positions)
        if self.f_max <= self.f_min:
            raise ConfigError("chirp.f_max must exceed chirp.f_min")
        if self.f_max > self.sample_rate / 2:
            raise ConfigError("chirp.f_max is above the Nyquist frequency")
        if self.period_s <= 0:
            raise ConfigError("chirp.period_s must be positive")
        if not self.speaker_offsets:
            raise ConfigError("chirp needs at least one speaker")
        if len(self.speaker_offsets) != len(self.speaker_positions):
            raise ConfigError("chirp.speaker_offsets and speaker_positions differ")
        if any(not 0 <= o < self.period_s for o in self.speaker_offsets):
            raise ConfigError("chirp.speaker_offsets must lie in [0, period_s)")

    @property
    def bandwidth(self) -> float:
        return self.f_max - self.f_min

    @property
    def period_samples(self) -> int:
        return int(round(self.period_s * self.sample_rate))

    @property
    def speaker_count(self) -> int:
        return len(self.speaker_offsets)

    @property
    def slope(self) -> float:
        """Sweep rate in Hz per second."""
        return self.bandwidth / self.period_s

    def offset_samples(self, speaker: int) -> int:
        return int(round(self.speaker_offsets[speaker] * self.sample_rate))

    def phase(self, t_local: np.ndarray) -> np.ndarray:
        """Chirp phase at time `t_local` into a period."""
        return 2 * np.pi * self.f_min * t_local + np.pi * self.slope * t_local**2

    def waveform(self, t: np.ndarray) -> np.ndarray:
        """Transmitted signal at absolute time t (periodic, starts at 0)."""
        return np.cos(self.phase(np.mod(t, self.period_s)))

    def beat_frequency(self, delay_s: float) -> float:
        return self.slope * delay_s


@dataclass(frozen=True, eq=False)
class RangeAoAProfile:
    """Range x angle MUSIC profile for one chirp period of one speaker."""

    values: np.ndarray
    range_axis: np.ndarray
    angle_axis: np.ndarray
    time_s: float = 0.0
    speaker: int = 0
    period_index: int = 0
    dropped: bool = False
    available_sample: int = 0

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def peak(self) -> tuple[float, float]:
        """(range_m, azimuth_deg) of the global maximum."""
        r, a = np.unravel_index(int(np.argmax(self.values)), self.values.shape)
        return float(self.range_axis[r]), float(self.angle_axis[a])


def chirp_frequency(config: ChirpConfig, t: np.ndarray) -> np.ndarray:
    """Instantaneous frequency; reaches f_max at the end of each period."""
    t = np.asarray(t, dtype=float)
    local = np.mod(t, config.period_s)
    local = np.where((local == 0) & (t > 0), config.period_s, local)
    return config.f_min + config.slope * local


def generate_chirp(
    config: ChirpConfig, duration_s: float | None = None
) -> MultichannelAudio:
    """One channel per speaker, each delayed by its start offset."""
    duration = config.period_s if duration_s is None else duration_s
    t = np.arange(int(round(duration * config.sample_rate))) / config.sample_rate
    channels = [
        np.where(t >= offset, config.waveform(t - offset), 0.0)
        for offset in config.speaker_offsets
    ]
    return MultichannelAudio(np.array(channels), config.sample_rate)


def _beat_lowpass(count: int, sample_rate: int) -> np.ndarray:
    freqs = np.abs(np.fft.fftfreq(count, 1.0 / sample_rate))
    taper = 0.5 * (
        1 + np.cos(np.pi * (freqs - BEAT_PASS_HZ) / (BEAT_STOP_HZ - BEAT_PASS_HZ))
    )
    return np.where(
        freqs <= BEAT_PASS_HZ, 1.0, np.where(freqs < BEAT_STOP_HZ, taper, 0.0)
    )


def period_start(
    config: ChirpConfig, period_index: int, speaker: int = 0, sync_offset_s: float = 0
) -> int:
    start = period_index * config.period_s + config.speaker_offsets[speaker]
    return int(round((start + sync_offset_s) * config.sample_rate))


def dechirp(
    received: MultichannelAudio,
    config: ChirpConfig,
    period_index: int,
    speaker: int = 0,
    sync_offset_s: float = 0.0,
) -> np.ndarray:
    """
    Complex beat signals of one chirp period, [mics, period_samples].

    The received period is multiplied by exp(+j phase(t')) of the
    transmitted chirp and low-passed (flat to 400 Hz, raised-cosine to
    600 Hz), which leaves one tone at +B t_d / T per path.

    Raises
    ------
    SyncError
        `sync_offset_s` exceeds half a period or the period is not fully
        inside the received stream.
    """
    if abs(sync_offset_s) > config.period_s / 2:
        raise SyncError(
            f"sync offset {sync_offset_s * 1e3:.1f} ms exceeds half a chirp period"
        )
    if received.sample_rate != config.sample_rate:
        raise ConfigError("received stream and chirp use different sample rates")

    count = config.period_samples
    start = period_start(config, period_index, speaker, sync_offset_s)
    if start < 0 or start + count > received.frames:
        raise SyncError(
            f"period {period_index} of speaker {speaker} spans samples "
            f"[{start}, {start + count}) outside the stream of {received.frames}"
        )

    t_local = np.arange(count) / config.sample_rate
    mixed = received.samples[:, start : start + count] * np.exp(
        1j * config.phase(t_local)
    )
    spectrum = np.fft.fft(mixed, axis=-1) * _beat_lowpass(count, config.sample_rate)
    return np.fft.ifft(spectrum, axis=-1)


def _window_layout(config: ChirpConfig, samples: int) -> tuple[int, int, int]:
    """(first sample, lags, snapshots) of the Hankel layout."""
    lead = int(round(LEAD_GUARD_S * config.sample_rate))
    tail = int(round(TAIL_GUARD_S * config.sample_rate))
    usable = len(range(lead, samples - tail, DECIMATION))
    lags = min(HANKEL_LAGS, usable)
    return lead, lags, usable - lags + 1


@lru_cache(maxsize=16)
def _range_angle_steering(
    config: ChirpConfig,
    geometry: ArrayGeometry,
    grid: GridConfig,
    speaker: int,
    samples: int,
) -> np.ndarray:
    """Unit-norm steering rows for every (range, angle) cell, [R*A, M*L]."""
    lead, lags, snapshots = _window_layout(config, samples)
    centre = (snapshots - 1) / 2
    times = (lead + (centre + np.arange(lags)) * DECIMATION) / config.sample_rate

    ranges, angles = grid.range_axis, grid.angle_axis
    theta = np.deg2rad(angles)
    directions = (
        np.cos(theta)[:, None] * geometry.axis
        + np.sin(theta)[:, None] * geometry.broadside
    )
    points = geometry.centroid + ranges[:, None, None] * directions[None, :, :]
    speaker_pos = np.asarray(config.speaker_positions[speaker])
    outbound = np.linalg.norm(points - speaker_pos, axis=-1)  # [R, A]
    inbound = np.linalg.norm(
        points[:, :, None, :] - geometry.positions[None, None, :, :], axis=-1
    )  # [R, A, M]
    tau = (outbound[:, :, None] + inbound) / config.speed_of_sound

    sweep = config.f_min + config.slope * times  # [L]
    delay = tau[..., None]
    phase = 2 * np.pi * delay * sweep - np.pi * config.slope * delay**2
    steering = np.exp(1j * phase).reshape(len(ranges) * len(angles), -1)
    steering /= np.linalg.norm(steering, axis=1, keepdims=True)
    steering.flags.writeable = False
    return steering


def music_2d(
    beat_matrix: np.ndarray,
    config: ChirpConfig,
    geometry: ArrayGeometry,
    grid: GridConfig = GridConfig(),
    speaker: int = 0,
    signal_dim: int = FMCW_SIGNAL_DIM,
) -> RangeAoAProfile:
    """
    Range-angle MUSIC over one period of beat signals.

    The beat signals are decimated and arranged as overlapping
    sub-windows (a Hankel layout across time, one block per microphone);
    averaging the outer products of the sub-windows smooths the
    beat spectrum over sub-bands and decorrelates coherent paths. The
    pseudo-spectrum is 1 / (1 - |E_s^H a|^2) with E_s the signal
    subspace, evaluated on the fixed grid and max-normalized.

    Raises
    ------
    NumericError
        The covariance has zero trace or non-finite entries.
    """
    beat = np.asarray(beat_matrix)
    mics, samples = beat.shape
    if mics < 2:
        raise ConfigError("music_2d needs at least two microphones")
    if mics != geometry.mic_count:
        raise ConfigError("beat matrix and geometry disagree on microphone count")
    if not np.all(np.isfinite(beat)):
        raise NumericError("beat signals are not finite")

    lead, lags, snapshots = _window_layout(config, samples)
    if snapshots < 1 or lags < 1:
        raise ConfigError("chirp period too short for the range-angle layout")
    decimated = beat[:, lead : samples - int(round(TAIL_GUARD_S * config.sample_rate))]
    decimated = decimated[:, ::DECIMATION]
    index = np.arange(snapshots)[:, None] + np.arange(lags)[None, :]
    X = decimated[:, index].transpose(1, 0, 2).reshape(snapshots, mics * lags).T

    R = X @ X.conj().T / snapshots
    trace = float(np.trace(R).real)
    if not trace > 0:
        logger.error("degenerate FMCW covariance, trace %.3g", trace)
        raise NumericError("degenerate FMCW covariance", trace=trace)
    R = R + grid.diagonal_loading * trace / len(R) * np.eye(len(R))

    try:
        _, vectors = np.linalg.eigh(R)
    except np.linalg.LinAlgError as err:
        raise NumericError(
            "eigendecomposition failed", condition=np.linalg.cond(R)
        ) from err
    signal = vectors[:, -signal_dim:]

    steering = _range_angle_steering(config, geometry, grid, speaker, samples)
    captured = np.sum(np.abs(steering.conj() @ signal) ** 2, axis=1)
    spectrum = 1.0 / np.maximum(1.0 - captured, 1e-12)
    values = spectrum.reshape(len(grid.range_axis), len(grid.angle_axis))
    return RangeAoAProfile(values / values.max(), grid.range_axis, grid.angle_axis)


def profile_sequence(
    stream: MultichannelAudio,
    config: ChirpConfig,
    geometry: ArrayGeometry,
    grid: GridConfig = GridConfig(),
    speakers: Sequence[int] | None = None,
    sync_offset_s: float = 0.0,
) -> list[RangeAoAProfile]:
    """
    One profile per chirp period and speaker, ordered by period start.

    Periods that run past the end of the stream, or whose covariance is
    degenerate, come back with `dropped=True` and an all-zero profile.
    """
    speakers = range(config.speaker_count) if speakers is None else speakers
    period = config.period_samples
    shape = (len(grid.range_axis), len(grid.angle_axis))
    profiles = []
    for s in speakers:
        count = ceil((stream.frames - config.offset_samples(s)) / period)
        for p in range(max(count, 0)):
            start = period_start(config, p, s, sync_offset_s)
            placeholder = RangeAoAProfile(
                np.zeros(shape),
                grid.range_axis,
                grid.angle_axis,
                time_s=start / config.sample_rate,
                speaker=s,
                period_index=p,
                dropped=True,
                available_sample=start + period,
            )
            try:
                beat = dechirp(stream, config, p, s, sync_offset_s)
                profile = music_2d(beat, config, geometry, grid, s)
            except (SyncError, NumericError) as err:
                logger.debug("dropping period %d of speaker %d: %s", p, s, err)
                profiles.append(placeholder)
                continue
            profiles.append(replace(placeholder, values=profile.values, dropped=False))
    profiles.sort(key=lambda prof: (prof.available_sample, prof.speaker))
    dropped = sum(prof.dropped for prof in profiles)
    if dropped:
        logger.info("%d of %d chirp periods dropped", dropped, len(profiles))
    return profiles
