"""
Synthetic acoustic scenes with ground truth.

The simulator places a microphone array and talkers in a shoebox room,
convolves dry speech with image-source impulse responses that follow
each talker's trajectory, adds FMCW chirp reflections for the tracking
band, and mixes everything at a requested SNR. The returned
`GroundTruth` carries the azimuth and distance tracks plus every
component signal, so each downstream estimate can be checked.

Conventions:
    - Azimuth is measured from the array centroid against the array
      axis (first to last microphone), 0 to 180 degrees.
    - Propagation is near-field: per-microphone distances are exact.
    - Time-varying channels are rendered block-wise: one impulse
      response per 40 ms block, blended with triangular cross-fades.
"""

import csv
import logging
import tomllib
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Any, Final, Iterable, Mapping, Sequence

import numpy as np
from scipy import signal

from SST.audio import CAPTURE_RATE, MultichannelAudio, load_wav
from SST.errors import ConfigError, ShapeError, UndefinedSNRError

logger = logging.getLogger(__name__)

SPEED_OF_SOUND: Final[float] = 343.0
DEFAULT_MIC_OFFSETS: Final[tuple[float, ...]] = (0.0, 0.03, 0.05, 0.08)
DEFAULT_DEVICE_ORIGIN: Final[tuple[float, float, float]] = (2.0, 1.0, 1.0)
RIR_BLOCK_S: Final[float] = 0.040
TRUTH_RATE_HZ: Final[int] = 100
SINC_WINDOW: Final[int] = 40  # samples

Point = tuple[float, float, float]


def as_point(value: Iterable[float]) -> Point:
    coords = tuple(float(v) for v in value)
    if len(coords) != 3:
        raise ConfigError(f"expected a 3D position, got {coords}")
    return coords  # type: ignore[return-value]


@dataclass(frozen=True)
class ArrayGeometry:
    """Microphone positions in room coordinates (metres)."""

    mic_positions: tuple[Point, ...]
    reference_index: int = 0

    def __post_init__(self):
        positions = tuple(as_point(p) for p in self.mic_positions)
        object.__setattr__(self, "mic_positions", positions)
        if len(positions) < 2:
            raise ConfigError("an array needs at least two microphones")
        if len(set(positions)) != len(positions):
            raise ConfigError("microphone positions must be distinct")
        if not 0 <= self.reference_index < len(positions):
            raise ConfigError("reference_index is out of range")

    @classmethod
    def linear(
        cls,
        offsets: Sequence[float] = DEFAULT_MIC_OFFSETS,
        origin: Sequence[float] = DEFAULT_DEVICE_ORIGIN,
        axis: Sequence[float] = (1.0, 0.0, 0.0),
    ) -> "ArrayGeometry":
        direction = np.asarray(axis, dtype=float)
        direction = direction / np.linalg.norm(direction)
        base = np.asarray(origin, dtype=float)
        return cls(tuple(as_point(base + o * direction) for o in offsets))

    @property
    def mic_count(self) -> int:
        return len(self.mic_positions)

    @cached_property
    def positions(self) -> np.ndarray:
        return np.array(self.mic_positions)

    @cached_property
    def centroid(self) -> np.ndarray:
        return self.positions.mean(axis=0)

    @cached_property
    def axis(self) -> np.ndarray:
        span = self.positions[-1] - self.positions[0]
        return span / np.linalg.norm(span)

    @cached_property
    def broadside(self) -> np.ndarray:
        """Horizontal unit vector perpendicular to the axis (90 degrees)."""
        side = np.cross(np.array([0.0, 0.0, 1.0]), self.axis)
        norm = np.linalg.norm(side)
        if norm < 1e-9:
            return np.array([0.0, 1.0, 0.0])
        return side / norm

    @cached_property
    def projections(self) -> np.ndarray:
        """Offset of each microphone from the reference along the axis."""
        rel = self.positions - self.positions[self.reference_index]
        return rel @ self.axis

    def point_at(self, azimuth_deg: float, distance_m: float) -> np.ndarray:
        theta = np.deg2rad(azimuth_deg)
        direction = np.cos(theta) * self.axis + np.sin(theta) * self.broadside
        return self.centroid + distance_m * direction

    def azimuths_of(self, points: np.ndarray) -> np.ndarray:
        rel = np.atleast_2d(points) - self.centroid
        cosine = (rel @ self.axis) / np.linalg.norm(rel, axis=1)
        return np.degrees(np.arccos(np.clip(cosine, -1.0, 1.0)))

    def azimuth_of(self, point: Sequence[float]) -> float:
        return float(self.azimuths_of(np.asarray(point, dtype=float))[0])

    def distances_to(self, points: np.ndarray) -> np.ndarray:
        return np.linalg.norm(np.atleast_2d(points) - self.centroid, axis=1)


@dataclass(frozen=True)
class RoomSpec:
    """Shoebox room; order 0 means free field."""

    dimensions: Point = (5.0, 4.0, 3.0)
    reflection_coefficient: float = 0.5
    max_image_order: int = 2
    speed_of_sound: float = SPEED_OF_SOUND

    def __post_init__(self):
        object.__setattr__(self, "dimensions", as_point(self.dimensions))
        if min(self.dimensions) <= 0:
            raise ConfigError("room.dimensions must be positive")
        if not 0.0 <= self.reflection_coefficient < 1.0:
            raise ConfigError("room.reflection_coefficient must lie in [0, 1)")
        if self.max_image_order < 0:
            raise ConfigError("room.max_image_order must be >= 0")
        if self.speed_of_sound <= 0:
            raise ConfigError("room.speed_of_sound must be positive")

    def contains(self, point: Sequence[float]) -> bool:
        p = np.asarray(point, dtype=float)
        return bool(np.all(p > 0) and np.all(p < np.asarray(self.dimensions)))


@dataclass(frozen=True)
class SourceTrajectory:
    """Piecewise-linear path through (time, position) waypoints."""

    waypoints: tuple[tuple[float, Point], ...]

    def __post_init__(self):
        points = tuple((float(t), as_point(p)) for t, p in self.waypoints)
        if not points:
            raise ConfigError("a trajectory needs at least one waypoint")
        times = [t for t, _ in points]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ConfigError("trajectory times must be strictly increasing")
        object.__setattr__(self, "waypoints", points)

    @classmethod
    def static(cls, position: Sequence[float]) -> "SourceTrajectory":
        return cls(((0.0, as_point(position)),))

    @property
    def times(self) -> np.ndarray:
        return np.array([t for t, _ in self.waypoints])

    @property
    def points(self) -> np.ndarray:
        return np.array([p for _, p in self.waypoints])

    @property
    def is_static(self) -> bool:
        return len(self.waypoints) == 1

    def positions_at(self, times: np.ndarray) -> np.ndarray:
        times = np.atleast_1d(np.asarray(times, dtype=float))
        points = self.points
        if self.is_static:
            return np.repeat(points, len(times), axis=0)
        return np.stack(
            [np.interp(times, self.times, points[:, k]) for k in range(3)], axis=1
        )

    def position_at(self, time: float) -> np.ndarray:
        return self.positions_at(np.array([time]))[0]

    def covers(self, duration: float) -> bool:
        if self.is_static:
            return True
        return self.times[0] <= 0.0 and self.times[-1] >= duration

    def check_inside(self, room: RoomSpec) -> None:
        for t, p in self.waypoints:
            if not room.contains(p):
                raise ConfigError(f"trajectory leaves the room at t={t:.3f}s: {p}")


@dataclass(frozen=True, eq=False)
class ImpulseResponse:
    """Sparse image-source response: one tap per image."""

    delays: np.ndarray  # seconds
    gains: np.ndarray
    orders: np.ndarray

    @property
    def tap_count(self) -> int:
        return len(self.delays)

    def to_filter(self, sample_rate: int, length: int | None = None) -> np.ndarray:
        """Render taps with Hann-windowed sinc fractional delays."""
        centers = self.delays * sample_rate
        half = SINC_WINDOW // 2
        if length is None:
            length = int(np.ceil(centers.max())) + half + 1 if len(centers) else 1
        h = np.zeros(length)
        base = np.floor(centers).astype(int) - half + 1
        index = base[:, None] + np.arange(SINC_WINDOW)[None, :]
        offset = index - centers[:, None]
        taper = 0.5 * (1.0 + np.cos(2.0 * np.pi * offset / SINC_WINDOW))
        values = self.gains[:, None] * taper * np.sinc(offset)
        valid = (index >= 0) & (index < length) & (np.abs(offset) <= half)
        np.add.at(h, index[valid], values[valid])
        return h


def simulate_rir(
    room: RoomSpec, source_pos: Sequence[float], mic_pos: Sequence[float]
) -> ImpulseResponse:
    """
    Image-source impulse response between one source and one microphone.

    Images up to `room.max_image_order` reflections are kept. Each tap
    sits at d/c with gain beta**order / d.
    """
    source = np.asarray(source_pos, dtype=float)
    mic = np.asarray(mic_pos, dtype=float)
    if not room.contains(source):
        raise ConfigError(f"source {tuple(source)} is outside the room")
    if not room.contains(mic):
        raise ConfigError(f"microphone {tuple(mic)} is outside the room")

    n = room.max_image_order
    dims = np.asarray(room.dimensions)
    m = np.arange(-n, n + 1)
    p = np.array([0, 1])
    grids = np.meshgrid(p, p, p, m, m, m, indexing="ij")
    parity = np.stack(grids[:3], axis=-1).reshape(-1, 3)
    shift = np.stack(grids[3:], axis=-1).reshape(-1, 3)

    order = (np.abs(shift - parity) + np.abs(shift)).sum(axis=1)
    keep = order <= n
    parity, shift, order = parity[keep], shift[keep], order[keep]

    images = (1 - 2 * parity) * source + 2 * shift * dims
    distance = np.linalg.norm(images - mic, axis=1)
    gains = room.reflection_coefficient**order / distance
    delays = distance / room.speed_of_sound

    ordering = np.argsort(delays, kind="stable")
    return ImpulseResponse(delays[ordering], gains[ordering], order[ordering])


# --------------------------------------------------------------------------
# Scene rendering
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Everything the simulator knows about a rendered scene."""

    times: np.ndarray
    aoa_tracks: np.ndarray  # [sources, times], degrees
    distance_tracks: np.ndarray  # [sources, times], metres
    components: tuple[MultichannelAudio, ...]
    residual: MultichannelAudio | None = None
    noise: MultichannelAudio | None = None
    snr_scale: float = 1.0
    snr_db: float | None = None

    @property
    def aoa_track(self) -> np.ndarray:
        return self.aoa_tracks[0]

    @property
    def distance_track(self) -> np.ndarray:
        return self.distance_tracks[0]

    @property
    def target(self) -> MultichannelAudio:
        return self.components[0]

    def aoa_at(self, times: np.ndarray) -> np.ndarray:
        return np.interp(times, self.times, self.aoa_track)


def _render_source(
    dry: np.ndarray,
    trajectory: SourceTrajectory,
    room: RoomSpec,
    geometry: ArrayGeometry,
    sample_rate: int,
) -> np.ndarray:
    mics = geometry.positions
    n = len(dry)

    def filters_at(position: np.ndarray) -> np.ndarray:
        responses = [simulate_rir(room, position, mic) for mic in mics]
        length = max(
            int(np.ceil(r.delays.max() * sample_rate)) + SINC_WINDOW for r in responses
        )
        return np.stack([r.to_filter(sample_rate, length) for r in responses])

    if trajectory.is_static:
        h = filters_at(trajectory.points[0])
        return signal.fftconvolve(dry[None, :], h, axes=-1)[:, :n]

    block = int(round(RIR_BLOCK_S * sample_rate))
    out = np.zeros((len(mics), n))
    t = np.arange(n)
    for b in range(int(np.ceil(n / block)) + 1):
        lo, hi = max(0, (b - 1) * block), min(n, (b + 1) * block)
        if lo >= hi:
            continue
        h = filters_at(trajectory.position_at(b * block / sample_rate))
        start = max(0, lo - h.shape[1] + 1)
        wet = signal.fftconvolve(dry[None, start:hi], h, axes=-1)
        weight = np.clip(1.0 - np.abs(t[lo:hi] - b * block) / block, 0.0, 1.0)
        out[:, lo:hi] += weight * wet[:, lo - start : hi - start]
    return out


def render_scene(
    sources: Sequence[tuple[np.ndarray, SourceTrajectory]],
    room: RoomSpec,
    geometry: ArrayGeometry,
    sample_rate: int = CAPTURE_RATE,
) -> tuple[MultichannelAudio, GroundTruth]:
    """
    Render talkers at the array; the first source is the target.

    The mixture is the sum of the per-source components in source order.
    The ground-truth tracks are sampled at 100 Hz.
    """
    if not sources:
        raise ConfigError("render_scene needs at least one source")
    lengths = {len(np.asarray(dry)) for dry, _ in sources}
    if len(lengths) != 1:
        raise ShapeError("render_scene", *[np.shape(dry) for dry, _ in sources])
    n = lengths.pop()
    duration = n / sample_rate

    for _, trajectory in sources:
        trajectory.check_inside(room)
        if not trajectory.covers(duration):
            raise ConfigError("trajectory does not span the signal duration")
    for mic in geometry.mic_positions:
        if not room.contains(mic):
            raise ConfigError(f"microphone {mic} is outside the room")

    components = []
    mixture = np.zeros((geometry.mic_count, n))
    for dry, trajectory in sources:
        wet = _render_source(
            np.asarray(dry, dtype=float), trajectory, room, geometry, sample_rate
        )
        components.append(MultichannelAudio(wet, sample_rate))
        mixture = mixture + wet

    times = np.arange(int(np.ceil(duration * TRUTH_RATE_HZ))) / TRUTH_RATE_HZ
    aoa, dist = [], []
    for _, trajectory in sources:
        positions = trajectory.positions_at(times)
        aoa.append(geometry.azimuths_of(positions))
        dist.append(geometry.distances_to(positions))

    truth = GroundTruth(
        times=times,
        aoa_tracks=np.array(aoa),
        distance_tracks=np.array(dist),
        components=tuple(components),
    )
    return MultichannelAudio(mixture, sample_rate), truth


@dataclass(frozen=True, eq=False)
class MixResult:
    mixture: MultichannelAudio
    scale: float
    residual: MultichannelAudio


def mix_at_snr(
    target: MultichannelAudio,
    interferers: Sequence[MultichannelAudio],
    noise: MultichannelAudio | None,
    target_snr_db: float,
    reference: int = 0,
) -> MixResult:
    """
    Scale interference plus noise to reach `target_snr_db`.

    The SNR is measured on the reference channel. The mixture is
    `target + residual` where `residual = scale * (interferers + noise)`.
    """
    others = list(interferers) + ([noise] if noise is not None else [])
    for other in others:
        if other.samples.shape != target.samples.shape:
            raise ShapeError("mix_at_snr", target.samples.shape, other.samples.shape)

    target_power = float(np.mean(target.samples[reference] ** 2))
    if target_power == 0.0:
        raise UndefinedSNRError("target is silent on the reference channel")

    combined = np.zeros_like(target.samples)
    for other in others:
        combined = combined + other.samples
    other_power = float(np.mean(combined[reference] ** 2))
    if other_power == 0.0:
        raise UndefinedSNRError("interference and noise are silent")

    scale = float(np.sqrt(target_power / (other_power * 10.0 ** (target_snr_db / 10))))
    residual = scale * combined
    return MixResult(
        mixture=target.with_samples(target.samples + residual),
        scale=scale,
        residual=target.with_samples(residual),
    )


def measured_snr_db(target: MultichannelAudio, residual: MultichannelAudio) -> float:
    ref_t = target.samples[0]
    ref_r = residual.samples[0]
    return float(10.0 * np.log10(np.mean(ref_t**2) / np.mean(ref_r**2)))


def white_noise(
    channels: int, frames: int, sample_rate: int, seed: int
) -> MultichannelAudio:
    rng = np.random.default_rng(seed)
    return MultichannelAudio(rng.standard_normal((channels, frames)), sample_rate)


# --------------------------------------------------------------------------
# FMCW reflections
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BodyPath:
    """Secondary reflection at a fixed offset from the main reflector."""

    offset: Point
    gain: float

    def __post_init__(self):
        object.__setattr__(self, "offset", as_point(self.offset))


def simulate_fmcw_scene(
    chirp_config: Any,
    reflector_trajectory: SourceTrajectory,
    geometry: ArrayGeometry,
    body_extra_paths: Sequence[BodyPath] = (),
    duration_s: float = 1.0,
    reflector_gain: float = 1.0,
    speakers: Sequence[int] | None = None,
) -> MultichannelAudio:
    """
    Received FMCW echoes at every microphone.

    Each path contributes gain * u(t - tau) with
    tau = (|speaker - point| + |point - mic|) / c, evaluated analytically
    so fractional delays are exact. The reflector position is frozen for
    the duration of each chirp period.
    """
    cfg = chirp_config
    fs = cfg.sample_rate
    n = int(round(duration_s * fs))
    t = np.arange(n) / fs
    period = cfg.period_samples
    out = np.zeros((geometry.mic_count, n))
    speaker_ids = range(cfg.speaker_count) if speakers is None else speakers

    paths = [(np.zeros(3), reflector_gain)] + [
        (np.asarray(p.offset), p.gain) for p in body_extra_paths
    ]
    block_starts = np.arange(0, n, period)
    positions = reflector_trajectory.positions_at(block_starts / fs)

    for s in speaker_ids:
        speaker = np.asarray(cfg.speaker_positions[s])
        offset = cfg.speaker_offsets[s]
        for b, start in enumerate(block_starts):
            stop = min(n, start + period)
            tb = t[start:stop]
            for shift, gain in paths:
                if gain == 0.0:
                    continue
                point = positions[b] + shift
                leg = np.linalg.norm(point - speaker)
                for m, mic in enumerate(geometry.positions):
                    tau = (leg + np.linalg.norm(point - mic)) / cfg.speed_of_sound
                    out[m, start:stop] += gain * cfg.waveform(tb - tau - offset)
    return MultichannelAudio(out, fs)


# --------------------------------------------------------------------------
# Synthetic talkers
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TalkerVoice:
    """Pitch and formant placement that identify a synthetic talker."""

    f0: float
    formants: tuple[float, float, float]

    @classmethod
    def from_id(cls, talker_id: int) -> "TalkerVoice":
        rng = np.random.default_rng([talker_id, 0x5157])
        return cls(
            f0=float(rng.uniform(90.0, 230.0)),
            formants=(
                float(rng.uniform(450.0, 900.0)),
                float(rng.uniform(1100.0, 2200.0)),
                float(rng.uniform(2300.0, 3300.0)),
            ),
        )


def synthetic_speech(
    duration_s: float,
    sample_rate: int = CAPTURE_RATE,
    seed: int = 0,
    voice: TalkerVoice | None = None,
) -> np.ndarray:
    """
    Speech-like test signal: a harmonic source with formant shaping,
    pitch drift, and syllable-rate amplitude modulation. Normalized to an
    RMS of 0.1.
    """
    rng = np.random.default_rng(seed)
    voice = voice or TalkerVoice.from_id(seed)
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate

    drift = np.cumsum(rng.standard_normal(n)) / np.sqrt(sample_rate)
    drift -= np.linspace(drift[0], drift[-1], n) if n else 0.0
    vibrato = 0.03 * np.sin(2 * np.pi * rng.uniform(4.0, 6.0) * t + rng.uniform(0, 6))
    f0 = voice.f0 * (1.0 + vibrato + 0.05 * np.tanh(drift))
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate

    ceiling = min(5000.0, 0.45 * sample_rate)
    voiced = np.zeros(n)
    for k in range(1, int(ceiling / voice.f0) + 1):
        fk = k * voice.f0
        envelope = sum(1.0 / (1.0 + ((fk - f) / 120.0) ** 2) for f in voice.formants)
        voiced += (envelope + 0.05) / np.sqrt(k) * np.cos(k * phase + rng.uniform(0, 6))

    syllable = rng.uniform(3.0, 5.0)
    gate = 0.5 * (1.0 - np.cos(2 * np.pi * syllable * t + rng.uniform(0, 6)))
    breath = 0.02 * rng.standard_normal(n)
    speech = voiced * (0.15 + gate) + breath

    rms = np.sqrt(np.mean(speech**2)) if n else 0.0
    return speech * (0.1 / rms) if rms > 0 else speech


# --------------------------------------------------------------------------
# Scene description files
# --------------------------------------------------------------------------

ROOM_KEYS: Final[tuple[str, ...]] = (
    "dimensions",
    "reflection_coefficient",
    "max_image_order",
)


@dataclass(frozen=True)
class SourceSpec:
    trajectory: SourceTrajectory
    talker: int | None = None
    path: Path | None = None


@dataclass(frozen=True)
class SceneSpec:
    """Parsed scene description; the first source is the target."""

    room: RoomSpec
    sources: tuple[SourceSpec, ...]
    duration_s: float = 4.0
    snr_db: float = 0.0
    noise_db: float = -30.0
    seed: int = 0
    fmcw: bool = True
    reflector_gain: float = 0.05
    body_paths: tuple[BodyPath, ...] = field(default_factory=tuple)


def _require(table: Mapping[str, Any], key: str, where: str) -> Any:
    if key not in table:
        raise ConfigError(f"missing key '{where}.{key}'")
    return table[key]


def _source_spec(
    table: Mapping[str, Any], geometry: ArrayGeometry, index: int
) -> SourceSpec:
    where = f"sources[{index}]"
    if "waypoints" in table:
        trajectory = SourceTrajectory(
            tuple((w[0], tuple(w[1:4])) for w in table["waypoints"])
        )
    else:
        azimuth = _require(table, "azimuth_deg", where)
        distance = _require(table, "distance_m", where)
        trajectory = SourceTrajectory.static(geometry.point_at(azimuth, distance))
    path = Path(table["path"]) if "path" in table else None
    talker = int(table.get("talker", index)) if path is None else None
    return SourceSpec(trajectory=trajectory, talker=talker, path=path)


def parse_scene_spec(data: Mapping[str, Any], geometry: ArrayGeometry) -> SceneSpec:
    """
    Build a `SceneSpec` from a parsed TOML document.

    The `[room]` table must name dimensions, reflection_coefficient and
    max_image_order; sources are `[[sources]]` tables given either as
    `waypoints = [[t, x, y, z], ...]` or as static `azimuth_deg` plus
    `distance_m` relative to the array.
    """
    room_table = _require(data, "room", "scene")
    for key in ROOM_KEYS:
        _require(room_table, key, "room")
    room = RoomSpec(
        dimensions=tuple(room_table["dimensions"]),
        reflection_coefficient=float(room_table["reflection_coefficient"]),
        max_image_order=int(room_table["max_image_order"]),
        speed_of_sound=float(room_table.get("speed_of_sound", SPEED_OF_SOUND)),
    )
    tables = _require(data, "sources", "scene")
    if not tables:
        raise ConfigError("a scene needs at least one source")
    sources = tuple(_source_spec(t, geometry, i) for i, t in enumerate(tables))
    fmcw = data.get("fmcw", {})
    return SceneSpec(
        room=room,
        sources=sources,
        duration_s=float(data.get("duration_s", 4.0)),
        snr_db=float(data.get("snr_db", 0.0)),
        noise_db=float(data.get("noise_db", -30.0)),
        seed=int(data.get("seed", 0)),
        fmcw=bool(fmcw.get("enabled", True)),
        reflector_gain=float(fmcw.get("reflector_gain", 0.05)),
        body_paths=tuple(
            BodyPath(tuple(p[:3]), float(p[3])) for p in fmcw.get("body_paths", [])
        ),
    )


def load_scene_spec(path: str | Path, geometry: ArrayGeometry) -> SceneSpec:
    with open(path, "rb") as f:
        return parse_scene_spec(tomllib.load(f), geometry)


@dataclass(frozen=True, eq=False)
class Scene:
    mixture: MultichannelAudio
    truth: GroundTruth
    fmcw: MultichannelAudio | None


def render_scene_spec(
    spec: SceneSpec,
    geometry: ArrayGeometry,
    chirp_config: Any,
    sample_rate: int = CAPTURE_RATE,
) -> Scene:
    """
    Render a full capture: talkers mixed at the requested SNR with white
    noise, plus FMCW echoes from the target when enabled.
    """
    n = int(round(spec.duration_s * sample_rate))
    dry = []
    for i, source in enumerate(spec.sources):
        if source.path is not None:
            clip = load_wav(source.path)
            if clip.sample_rate != sample_rate:
                raise ConfigError(f"{source.path}: expected {sample_rate} Hz audio")
            samples = np.resize(clip.samples[0], n)
        else:
            talker = source.talker if source.talker is not None else i
            samples = synthetic_speech(
                spec.duration_s,
                sample_rate,
                seed=spec.seed * 1000 + i,
                voice=TalkerVoice.from_id(talker),
            )
        dry.append((samples[:n], source.trajectory))

    _, truth = render_scene(dry, spec.room, geometry, sample_rate)
    target = truth.components[0]
    noise = white_noise(geometry.mic_count, n, sample_rate, spec.seed + 7)
    target_rms = np.sqrt(np.mean(target.samples[0] ** 2))
    noise = noise.with_samples(noise.samples * target_rms * 10 ** (spec.noise_db / 20))
    mix = mix_at_snr(target, truth.components[1:], noise, spec.snr_db)
    truth = replace(
        truth,
        residual=mix.residual,
        noise=noise,
        snr_scale=mix.scale,
        snr_db=spec.snr_db,
    )

    echoes = None
    mixture = mix.mixture
    if spec.fmcw:
        echoes = simulate_fmcw_scene(
            chirp_config,
            spec.sources[0].trajectory,
            geometry,
            spec.body_paths,
            duration_s=spec.duration_s,
            reflector_gain=spec.reflector_gain,
        )
        mixture = mixture.with_samples(mixture.samples + echoes.samples)

    logger.info(
        "rendered scene: %d sources, %.2f s, snr %.1f dB",
        len(spec.sources),
        spec.duration_s,
        spec.snr_db,
    )
    return Scene(mixture=mixture, truth=truth, fmcw=echoes)


def write_truth_csv(truth: GroundTruth, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["time_s", "azimuth_deg", "distance_m"])
        for t, a, d in zip(truth.times, truth.aoa_track, truth.distance_track):
            writer.writerow([f"{t:.6f}", f"{a:.6f}", f"{d:.6f}"])


def read_truth_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (times, azimuths, distances) from a truth CSV."""
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        missing = {"time_s", "azimuth_deg", "distance_m"} - set(reader.fieldnames or [])
        if missing:
            raise ConfigError(f"{path}: missing columns {sorted(missing)}")
        rows = [
            (float(r["time_s"]), float(r["azimuth_deg"]), float(r["distance_m"]))
            for r in reader
        ]
    data = np.array(rows).reshape(-1, 3)
    return data[:, 0], data[:, 1], data[:, 2]
