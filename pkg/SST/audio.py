"""
Multichannel audio I/O, band-splitting filters, resampling and STFT.

Everything downstream works on two value types defined here:
`MultichannelAudio` (a [channels x frames] sample matrix) and
`ComplexSpectrogram` (a [channels x bins x frames] STFT grid). Both are
immutable once constructed; their arrays are flagged read-only.

Filters:
    The 44.1 kHz capture is split into a speech band (low-pass, 8 kHz)
    and a tracking band (band-pass, 18-20 kHz) with linear-phase Kaiser
    FIRs designed for 80 dB of stopband attenuation. Offline calls
    remove the (N-1)/2 group delay so both bands stay sample-aligned
    with the input. Streaming callers use `FirStream` and `Resampler`,
    which keep filter state across blocks and report their fixed delay.

STFT:
    Frame t covers samples [t*hop, t*hop + window). No centering, no
    padding: signals shorter than one window yield zero frames. The
    inverse is a weighted overlap-add normalized by the summed squared
    window, which is exact wherever at least one frame covers a sample.
"""

import logging
import struct
from dataclasses import dataclass
from functools import lru_cache
from math import ceil
from pathlib import Path
from typing import Final

import numpy as np
import soundfile as sf
from scipy import signal

from SST.errors import (
    AudioFormatError,
    ConfigError,
    DataError,
    ShapeError,
    UnsupportedAudioError,
)

logger = logging.getLogger(__name__)

SUPPORTED_RATES: Final[tuple[int, ...]] = (16000, 44100)
CAPTURE_RATE: Final[int] = 44100
SPEECH_RATE: Final[int] = 16000

LPS_FLOOR: Final[float] = 1e-10
STOPBAND_DB: Final[float] = 80.0

SPEECH_CUTOFF_HZ: Final[float] = 8000.0
SPEECH_TRANSITION_HZ: Final[float] = 1500.0
TRACKING_BAND_HZ: Final[tuple[float, float]] = (17500.0, 20500.0)
TRACKING_TRANSITION_HZ: Final[float] = 1000.0

RESAMPLE_UP: Final[int] = 160
RESAMPLE_DOWN: Final[int] = 441
RESAMPLE_DELAY: Final[int] = 50  # output samples
RESAMPLE_CUTOFF_HZ: Final[float] = 7600.0


@dataclass(frozen=True, eq=False)
class MultichannelAudio:
    """Synchronized samples from several microphones."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        data = np.array(self.samples, dtype=np.float64)
        if data.ndim == 1:
            data = data[np.newaxis, :]
        if data.ndim != 2:
            raise ShapeError("MultichannelAudio", data.shape)
        if self.sample_rate not in SUPPORTED_RATES:
            raise ConfigError(
                f"sample rate {self.sample_rate} Hz is not one of {SUPPORTED_RATES}"
            )
        if not np.all(np.isfinite(data)):
            raise DataError("audio samples must be finite")
        data.flags.writeable = False
        object.__setattr__(self, "samples", data)

    @property
    def channel_count(self) -> int:
        return self.samples.shape[0]

    @property
    def frames(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.frames / self.sample_rate

    def channel(self, index: int) -> np.ndarray:
        return self.samples[index]

    def with_samples(self, samples: np.ndarray) -> "MultichannelAudio":
        return MultichannelAudio(samples, self.sample_rate)


@dataclass(frozen=True)
class StftConfig:
    """
    STFT framing parameters.

    Hop and window are given in seconds, as in the configuration file;
    `hop_samples` and `win_samples` are the rounded sample counts.
    """

    fft_size: int = 512
    hop_s: float = 0.010
    window_s: float = 0.032
    sample_rate: int = SPEECH_RATE

    def __post_init__(self):
        if self.fft_size <= 0:
            raise ConfigError("stft.fft_size must be positive")
        if self.sample_rate not in SUPPORTED_RATES:
            raise ConfigError(f"stft.sample_rate {self.sample_rate} is not supported")
        if self.win_samples > self.fft_size:
            raise ConfigError("stft.window_s must not exceed fft_size / sample_rate")
        if not 0 < self.hop_samples < self.win_samples:
            raise ConfigError("stft.hop_s must be positive and shorter than window_s")

    @property
    def hop_samples(self) -> int:
        return int(round(self.hop_s * self.sample_rate))

    @property
    def win_samples(self) -> int:
        return int(round(self.window_s * self.sample_rate))

    @property
    def freq_bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def freq_resolution(self) -> float:
        return self.sample_rate / self.fft_size

    @property
    def frequencies(self) -> np.ndarray:
        return np.arange(self.freq_bins) * self.freq_resolution

    def window(self) -> np.ndarray:
        return _hamming(self.win_samples)

    def frame_count(self, samples: int) -> int:
        if samples < self.win_samples:
            return 0
        return 1 + (samples - self.win_samples) // self.hop_samples


@dataclass(frozen=True, eq=False)
class ComplexSpectrogram:
    """Per-channel STFT grid, `bins[channel, freq, frame]`."""

    bins: np.ndarray
    config: StftConfig
    length: int | None = None

    def __post_init__(self):
        data = np.array(self.bins, dtype=np.complex128)
        if data.ndim == 2:
            data = data[np.newaxis]
        if data.ndim != 3 or data.shape[1] != self.config.freq_bins:
            raise ShapeError("ComplexSpectrogram", data.shape)
        data.flags.writeable = False
        object.__setattr__(self, "bins", data)

    @property
    def channel_count(self) -> int:
        return self.bins.shape[0]

    @property
    def freq_bins(self) -> int:
        return self.bins.shape[1]

    @property
    def time_frames(self) -> int:
        return self.bins.shape[2]

    @property
    def freq_resolution(self) -> float:
        return self.config.freq_resolution

    @property
    def hop(self) -> float:
        return self.config.hop_samples / self.config.sample_rate

    @property
    def window_len(self) -> float:
        return self.config.win_samples / self.config.sample_rate

    def with_bins(self, bins: np.ndarray) -> "ComplexSpectrogram":
        return ComplexSpectrogram(bins, self.config, self.length)


@lru_cache(maxsize=8)
def _hamming(length: int) -> np.ndarray:
    window = signal.get_window("hamming", length, fftbins=True)
    window.flags.writeable = False
    return window


# --------------------------------------------------------------------------
# WAV I/O
# --------------------------------------------------------------------------


def _check_riff(path: Path) -> None:
    """Walk the RIFF chunk list and reject truncated or foreign files."""
    size = path.stat().st_size
    with open(path, "rb") as f:
        header = f.read(12)
        if len(header) < 12 or header[:4] != b"RIFF" or header[8:12] != b"WAVE":
            raise AudioFormatError(f"{path}: not a RIFF/WAVE file")
        offset = 12
        found_format = False
        while offset + 8 <= size:
            f.seek(offset)
            chunk_id, chunk_size = struct.unpack("<4sI", f.read(8))
            if chunk_id == b"fmt ":
                found_format = True
            if chunk_id == b"data":
                if not found_format:
                    raise AudioFormatError(f"{path}: data chunk before fmt chunk")
                if offset + 8 + chunk_size > size:
                    raise AudioFormatError(f"{path}: truncated data chunk")
                return
            offset += 8 + chunk_size + (chunk_size & 1)
    raise AudioFormatError(f"{path}: no data chunk")


def load_wav(path: str | Path) -> MultichannelAudio:
    """
    Read a PCM16 or float32 WAV file.

    PCM16 samples are scaled by 1/32768, so the full-scale range maps to
    [-1, 1). Float files are read bit-exactly and widened to float64.

    Raises
    ------
    FileNotFoundError
        The path does not exist.
    AudioFormatError
        The header is malformed or the data chunk is truncated.
    UnsupportedAudioError
        The encoding or sample rate is not supported.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    _check_riff(path)

    try:
        info = sf.info(str(path))
    except RuntimeError as err:
        raise AudioFormatError(f"{path}: {err}") from err

    if info.subtype not in ("PCM_16", "FLOAT"):
        raise UnsupportedAudioError(f"{path}: unsupported encoding {info.subtype}")
    if info.samplerate not in SUPPORTED_RATES:
        raise UnsupportedAudioError(
            f"{path}: unsupported sample rate {info.samplerate} Hz"
        )

    try:
        if info.subtype == "PCM_16":
            raw, rate = sf.read(str(path), dtype="int16", always_2d=True)
            samples = raw.T.astype(np.float64) / 32768.0
        else:
            raw, rate = sf.read(str(path), dtype="float32", always_2d=True)
            samples = raw.T.astype(np.float64)
    except RuntimeError as err:
        raise AudioFormatError(f"{path}: {err}") from err

    logger.debug("loaded %s: %d ch, %d frames", path, samples.shape[0], raw.shape[0])
    return MultichannelAudio(samples, rate)


def save_wav(
    audio: MultichannelAudio, path: str | Path, encoding: str = "float32"
) -> None:
    """
    Write `audio` as a WAV file.

    `encoding` is "float32" (bit-exact for float32-representable input)
    or "pcm16" (rounded to the nearest step of 2^-15, clipped).
    """
    path = Path(path)
    match encoding:
        case "float32":
            data = audio.samples.T.astype(np.float32)
            subtype = "FLOAT"
        case "pcm16":
            scaled = np.round(audio.samples * 32768.0)
            data = np.clip(scaled, -32768, 32767).astype(np.int16).T
            subtype = "PCM_16"
        case _:
            raise ConfigError(f"unknown WAV encoding '{encoding}'")

    try:
        sf.write(
            str(path),
            np.ascontiguousarray(data),
            audio.sample_rate,
            subtype=subtype,
            format="WAV",
        )
    except RuntimeError as err:
        raise OSError(f"cannot write {path}: {err}") from err


# --------------------------------------------------------------------------
# Filters
# --------------------------------------------------------------------------


def _kaiser_fir(
    cutoff: float | tuple[float, float], transition: float, fs: float
) -> np.ndarray:
    numtaps, beta = signal.kaiserord(STOPBAND_DB, transition / (0.5 * fs))
    numtaps |= 1  # odd length keeps an integer group delay
    pass_zero = not isinstance(cutoff, tuple)
    taps = signal.firwin(
        numtaps, cutoff, window=("kaiser", beta), pass_zero=pass_zero, fs=fs
    )
    taps.flags.writeable = False
    return taps


@lru_cache(maxsize=1)
def speech_taps() -> np.ndarray:
    """Low-pass FIR for the 0-8 kHz speech band at 44.1 kHz."""
    return _kaiser_fir(SPEECH_CUTOFF_HZ, SPEECH_TRANSITION_HZ, CAPTURE_RATE)


@lru_cache(maxsize=1)
def tracking_taps() -> np.ndarray:
    """Band-pass FIR for the 18-20 kHz tracking band at 44.1 kHz."""
    return _kaiser_fir(TRACKING_BAND_HZ, TRACKING_TRANSITION_HZ, CAPTURE_RATE)


def group_delay(taps: np.ndarray) -> int:
    return (len(taps) - 1) // 2


def _filter_aligned(taps: np.ndarray, samples: np.ndarray) -> np.ndarray:
    delay = group_delay(taps)
    padded = np.pad(samples, ((0, 0), (0, delay)))
    return signal.lfilter(taps, 1.0, padded, axis=-1)[:, delay:]


def band_split(
    audio: MultichannelAudio,
) -> tuple[MultichannelAudio, MultichannelAudio]:
    """
    Split a 44.1 kHz capture into speech and tracking bands.

    Both outputs have the input's length and are delay-compensated, so
    sample n of either band lines up with sample n of the input.
    """
    if audio.sample_rate != CAPTURE_RATE:
        raise ConfigError(
            f"band_split needs {CAPTURE_RATE} Hz input to keep 20 kHz content, "
            f"got {audio.sample_rate} Hz"
        )
    speech = _filter_aligned(speech_taps(), audio.samples)
    tracking = _filter_aligned(tracking_taps(), audio.samples)
    return audio.with_samples(speech), audio.with_samples(tracking)


class FirStream:
    """Causal FIR filtering across consecutive blocks."""

    def __init__(self, taps: np.ndarray, channels: int):
        self.taps = taps
        self.channels = channels
        self.reset()

    @property
    def delay(self) -> int:
        return group_delay(self.taps)

    def reset(self) -> None:
        self._state = np.zeros((self.channels, len(self.taps) - 1))

    def process(self, block: np.ndarray) -> np.ndarray:
        out, self._state = signal.lfilter(
            self.taps, 1.0, block, axis=-1, zi=self._state
        )
        return out


@lru_cache(maxsize=1)
def _resample_phases() -> np.ndarray:
    fs_up = CAPTURE_RATE * RESAMPLE_UP
    numtaps = 2 * RESAMPLE_DOWN * RESAMPLE_DELAY + 1
    beta = signal.kaiser_beta(STOPBAND_DB)
    taps = signal.firwin(
        numtaps, RESAMPLE_CUTOFF_HZ, window=("kaiser", beta), fs=fs_up
    )
    depth = ceil(numtaps / RESAMPLE_UP)
    padded = np.zeros(depth * RESAMPLE_UP)
    padded[:numtaps] = taps * RESAMPLE_UP
    # phases[p, j] = h[p + j*L]
    phases = padded.reshape(depth, RESAMPLE_UP).T.copy()
    phases.flags.writeable = False
    return phases


class Resampler:
    """
    Stateful polyphase 44.1 kHz -> 16 kHz converter.

    Output sample n is the low-pass interpolation at input time
    n * 441/160 - 50 * 441/160; the constant lag of `RESAMPLE_DELAY`
    output samples comes from the symmetric filter. Blocks of any length
    may be pushed; the concatenated output does not depend on how the
    input was split.
    """

    chunk = 4410

    def __init__(self, channels: int):
        self.channels = channels
        self._phases = _resample_phases()
        self.reset()

    @property
    def delay(self) -> int:
        return RESAMPLE_DELAY

    def reset(self) -> None:
        depth = self._phases.shape[1]
        self._history = np.zeros((self.channels, depth))
        self._consumed = 0
        self._produced = 0

    def process(self, block: np.ndarray) -> np.ndarray:
        block = np.asarray(block, dtype=np.float64)
        pieces = [
            self._process(block[:, i : i + self.chunk])
            for i in range(0, block.shape[1], self.chunk)
        ]
        if not pieces:
            return np.zeros((self.channels, 0))
        return np.concatenate(pieces, axis=1)

    def _process(self, block: np.ndarray) -> np.ndarray:
        depth = self._phases.shape[1]
        buffer = np.concatenate([self._history, block], axis=1)
        start = self._consumed - depth  # absolute index of buffer[:, 0]
        self._consumed += block.shape[1]

        last = self._consumed - 1
        stop = (last * RESAMPLE_UP) // RESAMPLE_DOWN + 1
        n = np.arange(self._produced, stop)
        self._history = buffer[:, -depth:]
        if n.size == 0:
            return np.zeros((self.channels, 0))
        self._produced = stop

        newest = (n * RESAMPLE_DOWN) // RESAMPLE_UP - start
        phase = (n * RESAMPLE_DOWN) % RESAMPLE_UP
        index = newest[:, None] - np.arange(depth)[None, :]
        gathered = buffer[:, index]  # [C, n, depth]
        return np.einsum("cnj,nj->cn", gathered, self._phases[phase])


def resample_to_16k(audio: MultichannelAudio) -> MultichannelAudio:
    """
    Convert 44.1 kHz audio to 16 kHz.

    The input should already be band-limited below 8 kHz. The output has
    ceil(N * 160 / 441) samples and no delay relative to the input.
    """
    if audio.sample_rate != CAPTURE_RATE:
        raise ConfigError("resample_to_16k expects 44.1 kHz input")
    target = ceil(audio.frames * RESAMPLE_UP / RESAMPLE_DOWN)
    resampler = Resampler(audio.channel_count)
    tail = ceil((RESAMPLE_DELAY + 2) * RESAMPLE_DOWN / RESAMPLE_UP)
    padded = np.pad(audio.samples, ((0, 0), (0, tail)))
    out = resampler.process(padded)
    return MultichannelAudio(
        out[:, RESAMPLE_DELAY : RESAMPLE_DELAY + target], SPEECH_RATE
    )


# --------------------------------------------------------------------------
# STFT
# --------------------------------------------------------------------------


def stft(audio: MultichannelAudio, config: StftConfig) -> ComplexSpectrogram:
    """Short-time Fourier transform of every channel."""
    if audio.sample_rate != config.sample_rate:
        raise ConfigError(
            f"audio is {audio.sample_rate} Hz but the STFT expects "
            f"{config.sample_rate} Hz"
        )
    frames = config.frame_count(audio.frames)
    if frames == 0:
        empty = np.zeros((audio.channel_count, config.freq_bins, 0), complex)
        return ComplexSpectrogram(empty, config, audio.frames)

    win, hop = config.win_samples, config.hop_samples
    windows = np.lib.stride_tricks.sliding_window_view(audio.samples, win, axis=-1)
    segments = windows[:, : (frames - 1) * hop + 1 : hop] * config.window()
    spectra = np.fft.rfft(segments, n=config.fft_size, axis=-1)
    return ComplexSpectrogram(np.swapaxes(spectra, 1, 2), config, audio.frames)


def istft(spec: ComplexSpectrogram, config: StftConfig) -> MultichannelAudio:
    """
    Weighted overlap-add inverse of `stft`.

    Each frame is windowed again and the sum is divided by the summed
    squared window. A single frame therefore returns its own samples.
    When the spectrogram remembers the original length, the output is
    trimmed or zero-extended to it.
    """
    if spec.config != config:
        raise ConfigError("istft config does not match the spectrogram's config")

    win, hop = config.win_samples, config.hop_samples
    frames = spec.time_frames
    covered = (frames - 1) * hop + win if frames else 0
    out = np.zeros((spec.channel_count, covered))
    weight = np.zeros(covered)
    window = config.window()

    if frames:
        segments = np.fft.irfft(spec.bins, n=config.fft_size, axis=1)[:, :win, :]
        segments = segments * window[None, :, None]
        for t in range(frames):
            out[:, t * hop : t * hop + win] += segments[:, :, t]
            weight[t * hop : t * hop + win] += window**2
        out /= np.where(weight > 0, weight, 1.0)

    length = spec.length if spec.length is not None else covered
    if length > covered:
        out = np.pad(out, ((0, 0), (0, length - covered)))
    return MultichannelAudio(out[:, :length], config.sample_rate)


def log_power_spectrogram(spec: ComplexSpectrogram, channel: int) -> np.ndarray:
    """log(|Y|^2 + 1e-10) of one channel, shaped [freq, frame]."""
    return np.log(np.abs(spec.bins[channel]) ** 2 + LPS_FLOOR)
