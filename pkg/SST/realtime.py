"""
Streaming engine: 90 ms blocks in, separated 16 kHz audio out.

Per block the engine runs the causal front end (stateful band filters
and the polyphase resampler), frames the speech band, builds a range-angle
profile for every chirp period that completed and an audible profile for
every 300 ms of frames, and feeds each new STFT frame through the cached
separator. Output frames trail their input by the separator look-ahead;
the overlap-add emits each sample as soon as no later frame touches it.

The concatenated stream output equals `process_offline` on the whole
capture up to float rounding. Buffers are trimmed as they are consumed,
so the state size does not grow with the stream length; block wall times
are kept as a fixed-bin histogram (`LatencyStats`).

Telemetry (JSON lines, one object per pushed block):

    {"frame_idx": 12, "wall_ms": 31.8, "overrun": false, "emitted": 1440}
"""

import json
import logging
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Any

import numpy as np

from SST.audible import GridConfig, masked_music_profile
from SST.audio import (
    CAPTURE_RATE,
    RESAMPLE_DELAY,
    SPEECH_RATE,
    ComplexSpectrogram,
    FirStream,
    MultichannelAudio,
    Resampler,
    StftConfig,
    group_delay,
    istft,
    log_power_spectrogram,
    speech_taps,
    stft,
    tracking_taps,
)
from SST.errors import ConfigError, NumericError, ShapeError, SyncError
from SST.inaudible import ChirpConfig, dechirp, music_2d, period_start
from SST.network import (
    FrameInputs,
    FrameOutput,
    SpatialSeparatorModel,
    StreamingSeparator,
    compute_premask,
    pool_profile,
    separate,
    track_steering,
    unit_ratios,
)
from SST.pipeline import (
    extract_inputs,
    first_frame_after_sample,
    front_end,
)
from SST.simulate import ArrayGeometry, white_noise

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RealtimeConfig:
    frame_s: float = 0.09
    budget_ms: float = 150.0
    aoa_deg: float = 90.0  # steering of AoA-conditioned models

    def __post_init__(self):
        if self.frame_s <= 0:
            raise ConfigError("realtime.frame_s must be positive")
        if self.budget_ms <= 0:
            raise ConfigError("realtime.budget_ms must be positive")
        if not 0.0 <= self.aoa_deg <= 180.0:
            raise ConfigError("realtime.aoa_deg must lie in [0, 180]")

    @property
    def frame_samples(self) -> int:
        return int(round(self.frame_s * CAPTURE_RATE))


@dataclass(frozen=True)
class FrameTelemetry:
    frame_idx: int
    wall_ms: float
    overrun: bool
    emitted: int

    def as_json(self) -> str:
        return json.dumps(
            {
                "frame_idx": self.frame_idx,
                "wall_ms": round(self.wall_ms, 4),
                "overrun": self.overrun,
                "emitted": self.emitted,
            }
        )


@dataclass(frozen=True, eq=False)
class EngineOutput:
    samples: np.ndarray  # newly final 16 kHz samples
    frames: list[FrameOutput]
    telemetry: FrameTelemetry


@dataclass
class LatencyStats:
    """
    Fixed-bin histogram of block wall times plus monotone counters.

    Storage does not depend on how many blocks were recorded; times past
    the last bin land in an overflow bin. Percentiles are read off the
    bin upper edges and never exceed the largest time seen.
    """

    bin_ms: float = 0.25
    bin_count: int = 2000
    counts: np.ndarray = field(init=False, repr=False)
    count: int = 0
    total_ms: float = 0.0
    max_ms: float = 0.0
    overruns: int = 0

    def __post_init__(self):
        self.counts = np.zeros(self.bin_count + 1, dtype=np.int64)

    def add(self, wall_ms: float, overrun: bool) -> None:
        index = min(int(wall_ms // self.bin_ms), self.bin_count)
        self.counts[max(index, 0)] += 1
        self.count += 1
        self.total_ms += wall_ms
        self.max_ms = max(self.max_ms, wall_ms)
        self.overruns += int(overrun)

    @property
    def mean_ms(self) -> float:
        return self.total_ms / self.count if self.count else 0.0

    def percentile(self, q: float) -> float:
        if not self.count:
            return 0.0
        rank = q / 100.0 * self.count
        index = int(np.searchsorted(np.cumsum(self.counts), rank))
        if index >= self.bin_count:
            return self.max_ms
        return min((index + 1) * self.bin_ms, self.max_ms)


@dataclass
class _ProfileStream:
    """Temporal context and pending embeddings of one profile stream."""

    window: deque = field(default_factory=deque)
    pending: deque = field(default_factory=deque)  # (first_frame, embedding)
    held: np.ndarray | None = None


class StreamEngine:
    """
    One engine per stream. Without a model the engine passes the
    reference microphone through the same framing and overlap-add.

    Parameters
    ----------
    geometry, chirp, grid
        Array layout, chirp schedule and profile axes.
    model
        Trained separator, or None for passthrough.
    config
        Block cadence, latency budget and the fixed AoA used by
        AoA-conditioned models.
    telemetry
        Optional text stream receiving one JSON line per block.
    """

    def __init__(
        self,
        geometry: ArrayGeometry,
        chirp: ChirpConfig,
        model: SpatialSeparatorModel | None = None,
        stft: StftConfig = StftConfig(),
        grid: GridConfig = GridConfig(),
        config: RealtimeConfig = RealtimeConfig(),
        telemetry: IO[str] | None = None,
    ):
        if model is not None and model.stft != stft:
            raise ConfigError("the engine STFT differs from the model's")
        self.geometry = geometry
        self.chirp = chirp
        self.model = model
        self.stft = stft
        self.grid = grid
        self.config = config
        self.telemetry = telemetry
        self.sync_offset_s = group_delay(tracking_taps()) / CAPTURE_RATE
        self.separator = None if model is None else StreamingSeparator(model)
        self.reset()

    # ------------------------------------------------------------- state

    def reset(self) -> None:
        M = self.geometry.mic_count
        win = self.stft.win_samples
        self._speech_fir = FirStream(speech_taps(), M)
        self._tracking_fir = FirStream(tracking_taps(), M)
        self._resampler = Resampler(M)
        if self.separator is not None:
            self.separator.reset()

        self.blocks = 0
        self.consumed = 0  # capture samples
        self.produced = 0  # 16 kHz samples
        self.next_frame = 0

        self._speech = np.zeros((M, 0))
        self._speech_base = 0
        self._tracking = np.zeros((M, 0))
        self._tracking_base = 0
        self._next_period = [0] * self.chirp.speaker_count

        window = max(1, int(round(self.grid.update_s / self.stft.hop_s)))
        self._audible_window = window
        self._recent_bins: deque = deque(maxlen=window)
        self._audible = _ProfileStream()
        self._inaudible = _ProfileStream()

        self._out = np.zeros(win)
        self._weight = np.zeros(win)
        self._out_base = 0
        self._finalized = 0
        self.latency = LatencyStats()

    @property
    def lookahead(self) -> int:
        return 0 if self.separator is None else self.separator.lookahead

    # -------------------------------------------------------- front end

    def _append_speech(self, samples: np.ndarray) -> None:
        self._speech = np.concatenate([self._speech, samples], axis=1)
        self.produced += samples.shape[1]

    def _append_tracking(self, samples: np.ndarray) -> None:
        self._tracking = np.concatenate([self._tracking, samples], axis=1)

    def _trim(self) -> None:
        keep = self.next_frame * self.stft.hop_samples
        drop = keep - self._speech_base
        if drop > 0:
            self._speech = self._speech[:, drop:]
            self._speech_base = keep

        starts = [
            period_start(self.chirp, p, s, self.sync_offset_s)
            - self.chirp.offset_samples(s)
            for s, p in enumerate(self._next_period)
        ]
        keep = max(min(starts), self._tracking_base)
        drop = keep - self._tracking_base
        if drop > 0:
            self._tracking = self._tracking[:, drop:]
            self._tracking_base = keep

    # ------------------------------------------------------------ profiles

    @property
    def _uses_embeddings(self) -> bool:
        return self.model is not None and self.model.config.uses_embeddings

    def _embed(
        self, stream: _ProfileStream, embedder: Any, pooled: np.ndarray
    ) -> np.ndarray:
        kt = embedder.config.temporal_kernel
        stream.window.append(pooled)
        while len(stream.window) > kt:
            stream.window.popleft()
        return embedder.embed_latest(np.stack(stream.window))

    def _period_profile(self, period: int, speaker: int) -> np.ndarray:
        chirp = self.chirp
        start = period_start(chirp, period, speaker, self.sync_offset_s)
        begin = start - chirp.offset_samples(speaker)
        end = start + chirp.period_samples
        lo = begin - self._tracking_base
        head = max(0, -lo)
        piece = self._tracking[:, max(lo, 0) : end - self._tracking_base]
        piece = np.pad(piece, ((0, 0), (head, 0)))
        shape = tuple(len(a) for a in (self.grid.range_axis, self.grid.angle_axis))
        try:
            if start < 0:
                raise SyncError(f"period {period} starts before the stream")
            beat = dechirp(MultichannelAudio(piece, CAPTURE_RATE), chirp, 0, speaker)
            return music_2d(beat, chirp, self.geometry, self.grid, speaker).values
        except (SyncError, NumericError) as err:
            logger.debug("dropping period %d of speaker %d: %s", period, speaker, err)
            return np.zeros(shape)

    def _update_inaudible(self) -> None:
        while True:
            candidates = []
            for s, p in enumerate(self._next_period):
                start = period_start(self.chirp, p, s, self.sync_offset_s)
                candidates.append((start + self.chirp.period_samples, s, p))
            available, s, p = min(candidates)
            if available > self.consumed:
                return
            self._next_period[s] += 1
            if not self._uses_embeddings:
                continue
            assert self.model is not None and self.model.inaudible is not None
            values = self._period_profile(p, s)
            pooled = pool_profile(values, self.model.config.embedding.profile_pool)
            embedding = self._embed(self._inaudible, self.model.inaudible, pooled)
            first = int(first_frame_after_sample(self.stft, available - 1))
            self._inaudible.pending.append((first, embedding))

    def _update_audible(self, frame: int) -> None:
        if (frame + 1) % self._audible_window or not self._uses_embeddings:
            return
        assert self.model is not None and self.model.audible is not None
        bins = np.stack(self._recent_bins, axis=-1)
        spec = ComplexSpectrogram(bins, self.stft)
        profile = masked_music_profile(spec, None, self.geometry, None, self.grid)
        pooled = pool_profile(profile.values, self.model.config.embedding.profile_pool)
        embedding = self._embed(self._audible, self.model.audible, pooled)
        self._audible.pending.append((frame, embedding))

    def _held_embedding(self, frame: int) -> np.ndarray:
        assert self.model is not None
        cfg = self.model.config.embedding
        parts = []
        for stream, enabled in (
            (self._audible, cfg.use_audible),
            (self._inaudible, cfg.use_inaudible),
        ):
            while stream.pending and stream.pending[0][0] <= frame:
                stream.held = stream.pending.popleft()[1]
            if enabled and stream.held is not None:
                parts.append(stream.held)
            else:
                parts.append(np.zeros(cfg.embed_dim))
        return np.concatenate(parts)

    # ------------------------------------------------------------- frames

    def _frame_bins(self, frame: int) -> np.ndarray:
        hop, win = self.stft.hop_samples, self.stft.win_samples
        lo = frame * hop - self._speech_base
        segment = self._speech[:, lo : lo + win] * self.stft.window()
        return np.fft.rfft(segment, n=self.stft.fft_size, axis=-1)

    def _separate_frame(self, frame: int, bins: np.ndarray) -> list[FrameOutput]:
        if self.separator is None or self.model is None:
            return [FrameOutput(frame, bins[0], None)]
        spec = ComplexSpectrogram(bins[..., np.newaxis], self.stft)
        fixed = None
        if self.model.config.separator.conditioning == "aoa":
            steering = track_steering(
                self.geometry, self.stft.frequencies, np.array([self.config.aoa_deg])
            )[..., 0]
            mode = self.model.config.separator.premask_mode
            fixed = compute_premask(spec, steering, mode).values[:, 0]
        embedding = self._held_embedding(frame) if self._uses_embeddings else None
        inputs = FrameInputs(
            reference=bins[0],
            lps=log_power_spectrogram(spec, 0)[:, 0],
            ratios=unit_ratios(spec)[:, :, 0],
            embedding=embedding,
            fixed_premask=fixed,
        )
        return self.separator.push(frame, inputs)

    def _overlap_add(self, outputs: list[FrameOutput]) -> np.ndarray:
        hop, win = self.stft.hop_samples, self.stft.win_samples
        window = self.stft.window()
        emitted = []
        for out in outputs:
            start = out.frame_index * hop
            segment = np.fft.irfft(out.spectrum, n=self.stft.fft_size)[:win] * window
            need = start + win - self._out_base
            if need > len(self._out):
                grow = need - len(self._out)
                self._out = np.pad(self._out, (0, grow))
                self._weight = np.pad(self._weight, (0, grow))
            lo = start - self._out_base
            self._out[lo : lo + win] += segment
            self._weight[lo : lo + win] += window**2
            emitted.append(self._release(start + hop))
        return np.concatenate(emitted) if emitted else np.zeros(0)

    def _release(self, upto: int) -> np.ndarray:
        count = upto - self._finalized
        if count <= 0:
            return np.zeros(0)
        lo = self._finalized - self._out_base
        weight = self._weight[lo : lo + count]
        ready = self._out[lo : lo + count] / np.where(weight > 0, weight, 1.0)
        self._out = self._out[lo + count :]
        self._weight = self._weight[lo + count :]
        self._out_base = upto
        self._finalized = upto
        return ready

    # ----------------------------------------------------------------- API

    def push_frame(self, block: np.ndarray) -> EngineOutput:
        """
        Push the next block of 44.1 kHz capture, [mics, samples].

        Returns the 16 kHz samples that became final. A block whose
        processing takes longer than its own duration is flagged as an
        overrun; its output is still returned.
        """
        block = np.asarray(block, dtype=np.float64)
        if block.ndim != 2 or block.shape[0] != self.geometry.mic_count:
            raise ShapeError("push_frame", block.shape, (self.geometry.mic_count,))
        started = time.perf_counter()

        speech = self._speech_fir.process(block)
        self._append_tracking(self._tracking_fir.process(block))
        self.consumed += block.shape[1]
        self._append_speech(self._resampler.process(speech))
        self._update_inaudible()

        hop, win = self.stft.hop_samples, self.stft.win_samples
        outputs: list[FrameOutput] = []
        while self.next_frame * hop + win <= self.produced:
            frame = self.next_frame
            bins = self._frame_bins(frame)
            self._recent_bins.append(bins)
            self._update_audible(frame)
            outputs += self._separate_frame(frame, bins)
            self.next_frame += 1
        samples = self._overlap_add(outputs)
        self._trim()

        wall_ms = (time.perf_counter() - started) * 1e3
        budget_ms = block.shape[1] / CAPTURE_RATE * 1e3
        telemetry = FrameTelemetry(
            self.blocks, wall_ms, wall_ms > budget_ms, len(samples)
        )
        if telemetry.overrun:
            logger.warning(
                "block %d took %.1f ms of a %.1f ms budget",
                self.blocks,
                wall_ms,
                budget_ms,
            )
        if self.telemetry is not None:
            self.telemetry.write(telemetry.as_json() + "\n")
        self.latency.add(wall_ms, telemetry.overrun)
        self.blocks += 1
        return EngineOutput(samples, outputs, telemetry)

    def finish(self) -> np.ndarray:
        """End the stream; returns the remaining samples up to its full length."""
        outputs = [] if self.separator is None else self.separator.flush()
        tail = [self._overlap_add(outputs)]
        covered = self._out_base + len(self._out)
        tail.append(self._release(covered))
        missing = self.produced - self._finalized
        if missing > 0:
            tail.append(np.zeros(missing))
            self._finalized += missing
        return np.concatenate(tail)

    def process(self, audio: MultichannelAudio) -> MultichannelAudio:
        """Stream a whole capture through the engine block by block."""
        self._check_capture(audio)
        self.reset()
        step = self.config.frame_samples
        pieces = [
            self.push_frame(audio.samples[:, i : i + step]).samples
            for i in range(0, audio.frames, step)
        ]
        pieces.append(self.finish())
        return MultichannelAudio(np.concatenate(pieces)[np.newaxis], SPEECH_RATE)

    def process_offline(self, audio: MultichannelAudio) -> MultichannelAudio:
        """
        Whole-signal reference for the stream: causal front end, batch
        separator and inverse STFT.
        """
        self._check_capture(audio)
        front = front_end(audio, compensate=False)
        if self.model is None:
            spec = stft(front.speech, self.stft)
            return istft(spec.with_bins(spec.bins[:1]), self.stft)
        frames = self.stft.frame_count(front.speech.frames)
        track = np.full(frames, self.config.aoa_deg)
        extracted = extract_inputs(
            front, self.model, self.geometry, self.chirp, self.grid, aoa_track=track
        )
        target, _ = separate(self.model, extracted.inputs)
        return istft(target, self.stft)

    def _check_capture(self, audio: MultichannelAudio) -> None:
        if audio.sample_rate != CAPTURE_RATE:
            raise ConfigError(f"the engine expects {CAPTURE_RATE} Hz capture")
        if audio.channel_count != self.geometry.mic_count:
            raise ShapeError(
                "engine", audio.samples.shape, (self.geometry.mic_count,)
            )

    def algorithmic_latency_ms(self) -> float:
        """Look-ahead, analysis window and front-end group delay."""
        lookahead = self.lookahead * self.stft.hop_s
        window = self.stft.window_s
        front = group_delay(speech_taps()) / CAPTURE_RATE + RESAMPLE_DELAY / SPEECH_RATE
        return (lookahead + window + front) * 1e3


# --------------------------------------------------------------------------
# Benchmark
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LatencyReport:
    blocks: int
    frame_ms: float
    p50_ms: float
    p95_ms: float
    max_ms: float
    mean_ms: float
    real_time_factor: float
    overruns: int
    algorithmic_latency_ms: float
    total_latency_ms: float
    budget_ms: float
    within_budget: bool

    def as_dict(self) -> dict[str, Any]:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.as_dict(), indent=2))


def benchmark(
    engine: StreamEngine,
    duration_s: float = 10.0,
    audio: MultichannelAudio | None = None,
    seed: int = 0,
) -> LatencyReport:
    """
    Push `audio` (or `duration_s` of white noise) through `engine` and
    report per-block wall time statistics.

    Total latency is the algorithmic latency plus the p95 block time.
    """
    if audio is None:
        frames = int(round(duration_s * CAPTURE_RATE))
        audio = white_noise(engine.geometry.mic_count, frames, CAPTURE_RATE, seed)
        audio = audio.with_samples(0.01 * audio.samples)
    engine.process(audio)
    stats = engine.latency
    algorithmic = engine.algorithmic_latency_ms()
    p95 = stats.percentile(95)
    total = algorithmic + p95
    report = LatencyReport(
        blocks=stats.count,
        frame_ms=engine.config.frame_s * 1e3,
        p50_ms=stats.percentile(50),
        p95_ms=p95,
        max_ms=stats.max_ms,
        mean_ms=stats.mean_ms,
        real_time_factor=stats.total_ms / 1e3 / max(audio.duration, 1e-12),
        overruns=stats.overruns,
        algorithmic_latency_ms=algorithmic,
        total_latency_ms=total,
        budget_ms=engine.config.budget_ms,
        within_budget=bool(total <= engine.config.budget_ms),
    )
    logger.info(
        "benchmark: p50 %.1f ms, p95 %.1f ms, RTF %.3f, total latency %.1f ms",
        report.p50_ms,
        report.p95_ms,
        report.real_time_factor,
        report.total_latency_ms,
    )
    return report
