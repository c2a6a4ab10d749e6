"""
Losses, dataset assembly, the multi-task training loop and evaluation.

Metric log (JSON lines, one object per epoch and split):

    {"epoch": 3, "split": "val", "sisnr_db": 7.41, "aoa_err_deg": 6.2,
     "lr": 0.0001, "wall_ms": 5123.4, "loss": -7.1}

Dataset manifest (CSV): example_id, split, seed, snr_db, interferers,
target_talker, path. Each example is one `.npz` file next to it.
"""

import csv
import json
import logging
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from math import ceil
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
from scipy import signal

from SST import tensor as T
from SST.audible import GridConfig
from SST.audio import (
    CAPTURE_RATE,
    ComplexSpectrogram,
    MultichannelAudio,
    istft,
    load_wav,
)
from SST.beamform import mvdr_beamform
from SST.errors import (
    ConfigError,
    DataError,
    DivergenceError,
    ShapeError,
    UndefinedMetricError,
)
from SST.inaudible import ChirpConfig
from SST.network import SeparatorInputs, SpatialSeparatorModel, istft_tensor
from SST.pipeline import extract_inputs, frame_times, front_end
from SST.simulate import (
    ArrayGeometry,
    RoomSpec,
    SourceTrajectory,
    TalkerVoice,
    measured_snr_db,
    mix_at_snr,
    render_scene,
    simulate_fmcw_scene,
    synthetic_speech,
    white_noise,
)
from SST.tensor import Tensor

logger = logging.getLogger(__name__)

SISNR_EPS = 1e-12
SNR_BUCKETS = (("[-6,-2)", -2.0), ("[-2,2)", 2.0), ("[2,6]", np.inf))
INTERFERER_GROUPS = ("0", "1", "2+")
EVAL_COLUMNS = (
    "method",
    "grouping",
    "group",
    "count",
    "sisnr_in_db",
    "sisnr_out_db",
    "improvement_db",
    "aoa_err_deg",
)


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------


def _check_pair(op: str, estimate: np.ndarray, reference: np.ndarray) -> np.ndarray:
    if estimate.shape != reference.shape or estimate.ndim != 1:
        raise ShapeError(op, estimate.shape, reference.shape)
    centred = reference - reference.mean()
    if not np.any(centred):
        raise UndefinedMetricError(f"{op}: reference is zero after mean removal")
    return centred


def sisnr(estimate: np.ndarray, reference: np.ndarray) -> float:
    """
    Scale-invariant SNR in dB.

    Both signals are made zero-mean; the estimate is projected onto the
    reference and 10 log10(|target|^2 / (|error|^2 + 1e-12)) returned.
    A perfect estimate therefore scores about 120 dB per unit of
    reference energy.
    """
    estimate = np.asarray(estimate, dtype=float)
    x = _check_pair("sisnr", estimate, np.asarray(reference, dtype=float))
    x_hat = estimate - estimate.mean()
    target = (x_hat @ x) / (x @ x) * x
    error = x_hat - target
    return float(10 * np.log10((target @ target) / (error @ error + SISNR_EPS)))


def sisnr_tensor(estimate: Tensor, reference: np.ndarray) -> Tensor:
    """`sisnr` as a tape-tracked scalar."""
    x = _check_pair("sisnr", estimate.data, np.asarray(reference, dtype=float))
    n = estimate.shape[0]
    dtype = estimate.data.dtype
    centred = T.sub(estimate, T.broadcast_to(T.reshape(T.mean(estimate), (1,)), (n,)))
    ref = Tensor(x.astype(dtype))
    coefficient = T.scale(T.sum_(T.mul(centred, ref)), 1.0 / float(x @ x))
    target = T.mul(T.broadcast_to(T.reshape(coefficient, (1,)), (n,)), ref)
    error = T.sub(centred, target)
    ratio = T.div(
        T.sum_(T.mul(target, target)), T.shift(T.sum_(T.mul(error, error)), SISNR_EPS)
    )
    return T.scale(T.log(ratio), 10.0 / np.log(10.0))


def sisnr_loss(estimate: Tensor, reference: np.ndarray) -> Tensor:
    return T.scale(sisnr_tensor(estimate, reference), -1.0)


def aoa_loss(estimate: Tensor, truth: np.ndarray) -> Tensor:
    """Mean absolute AoA error in degrees."""
    truth = np.asarray(truth, dtype=estimate.data.dtype)
    if estimate.shape != truth.shape:
        raise ShapeError("aoa_loss", estimate.shape, truth.shape)
    return T.l1(estimate, Tensor(truth))


@dataclass(frozen=True, eq=False)
class LossTerms:
    total: Tensor
    separation: float
    localization: float | None


def multitask_loss(
    estimate: Tensor,
    reference: np.ndarray,
    aoa_estimate: Tensor | None,
    aoa_truth: np.ndarray | None,
    weight: float,
) -> LossTerms:
    """L = -SiSNR + weight * L1(AoA); the AoA term is skipped without a head."""
    separation = sisnr_loss(estimate, reference)
    if aoa_estimate is None or aoa_truth is None:
        return LossTerms(separation, separation.item(), None)
    localization = aoa_loss(aoa_estimate, aoa_truth)
    total = T.add(separation, T.scale(localization, weight))
    return LossTerms(total, separation.item(), localization.item())


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    lr_milestones: tuple[int, ...] = (40, 75)
    lr_gamma: float = 0.5
    max_epochs: int = 150
    patience: int = 10
    aoa_weight: float = 0.5
    batch_size: int = 4
    seed: int = 0
    precision: str = "float32"
    min_improvement_db: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "lr_milestones", tuple(self.lr_milestones))
        if self.lr < 0:
            raise ConfigError("train.lr must be >= 0")
        if self.aoa_weight < 0:
            raise ConfigError("train.aoa_weight must be >= 0")
        if self.patience < 1:
            raise ConfigError("train.patience must be >= 1")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ConfigError("train.max_epochs and train.batch_size must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("train.precision must be float32 or float64")

    def lr_at(self, epoch: int) -> float:
        drops = sum(epoch >= m for m in self.lr_milestones)
        return self.lr * self.lr_gamma**drops


@dataclass(frozen=True)
class DatasetConfig:
    examples: int = 500
    test_fraction: float = 0.2
    talkers: int = 10
    segment_s: float = 4.0
    snr_min_db: float = -6.0
    snr_max_db: float = 6.0
    interferers_min: int = 0
    interferers_max: int = 3
    moving_fraction: float = 0.5
    reflector_gain: float = 0.05
    noise_db: float = -30.0

    def __post_init__(self):
        if self.examples < 1 or self.talkers < 2:
            raise ConfigError("dataset needs >= 1 example and >= 2 talkers")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("dataset.test_fraction must lie in (0, 1)")
        if self.snr_min_db > self.snr_max_db:
            raise ConfigError("dataset.snr_min_db exceeds dataset.snr_max_db")
        if not 0 <= self.interferers_min <= self.interferers_max:
            raise ConfigError("dataset interferer range is empty")
        if self.segment_s <= 0:
            raise ConfigError("dataset.segment_s must be positive")


# --------------------------------------------------------------------------
# Corpora
# --------------------------------------------------------------------------


class Corpus(ABC):
    """Source of dry single-talker speech at the capture rate."""

    @property
    @abstractmethod
    def talkers(self) -> list[str]:
        raise NotImplementedError

    @abstractmethod
    def utterance(self, talker: str, duration_s: float, seed: int) -> np.ndarray:
        raise NotImplementedError


class SyntheticCorpus(Corpus):
    """Seeded harmonic talkers; talker i always has the same voice."""

    def __init__(self, count: int):
        self._talkers = [f"synthetic-{i:03d}" for i in range(count)]

    @property
    def talkers(self) -> list[str]:
        return self._talkers

    def utterance(self, talker: str, duration_s: float, seed: int) -> np.ndarray:
        voice = TalkerVoice.from_id(self._talkers.index(talker))
        return synthetic_speech(duration_s, CAPTURE_RATE, seed, voice)


class WavCorpus(Corpus):
    """A directory with one sub-directory of WAV files per talker."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        folders = sorted(self.root.iterdir()) if self.root.is_dir() else []
        self._files = {
            d.name: files
            for d in folders
            if d.is_dir() and (files := sorted(d.glob("*.wav")))
        }
        if not self._files:
            raise ConfigError(f"no talker directories with WAV files in {root}")

    @property
    def talkers(self) -> list[str]:
        return list(self._files)

    def utterance(self, talker: str, duration_s: float, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        path = self._files[talker][rng.integers(len(self._files[talker]))]
        audio = load_wav(path)
        mono = audio.samples.mean(axis=0)
        if audio.sample_rate != CAPTURE_RATE:
            mono = signal.resample_poly(mono, 441, 160)
        n = int(round(duration_s * CAPTURE_RATE))
        if len(mono) < n:
            mono = np.pad(mono, (0, n - len(mono)))
        start = rng.integers(len(mono) - n + 1)
        segment = mono[start : start + n]
        rms = np.sqrt(np.mean(segment**2))
        return segment * (0.1 / rms) if rms > 0 else segment


def get_corpus(path: str | Path | None, talkers: int) -> Corpus:
    return SyntheticCorpus(talkers) if path is None else WavCorpus(path)


# --------------------------------------------------------------------------
# Dataset
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ExamplePlan:
    example_id: str
    split: str
    seed: int
    snr_db: float
    target_talker: str
    interferer_talkers: tuple[str, ...]

    @property
    def interferers(self) -> int:
        return len(self.interferer_talkers)


def split_talkers(talkers: Sequence[str], test_fraction: float) -> dict[str, list[str]]:
    """Disjoint train/test talker sets; the test set takes the last talkers."""
    ordered = sorted(talkers)
    if len(ordered) < 2:
        raise ConfigError("a talker-disjoint split needs at least two talkers")
    held_out = min(len(ordered) - 1, max(1, round(len(ordered) * test_fraction)))
    return {"train": ordered[:-held_out], "test": ordered[-held_out:]}


def sample_example_plans(
    corpus: Corpus, config: DatasetConfig, seed: int
) -> list[ExamplePlan]:
    """
    Draw example parameters: interferer count uniform over the configured
    integer range, SNR uniform over the dB range. Deterministic in `seed`.
    """
    if not corpus.talkers:
        raise ConfigError("the corpus has no talkers")
    rng = np.random.default_rng(seed)
    pools = split_talkers(corpus.talkers, config.test_fraction)
    test_count = max(1, round(config.examples * config.test_fraction))
    plans = []
    for i in range(config.examples):
        split = "test" if i >= config.examples - test_count else "train"
        pool = pools[split]
        interferers = int(
            rng.integers(config.interferers_min, config.interferers_max + 1)
        )
        picks = rng.choice(
            len(pool), size=1 + interferers, replace=len(pool) < 1 + interferers
        )
        plans.append(
            ExamplePlan(
                example_id=f"ex{i:05d}",
                split=split,
                seed=int(rng.integers(2**31 - 1)),
                snr_db=float(rng.uniform(config.snr_min_db, config.snr_max_db)),
                target_talker=pool[picks[0]],
                interferer_talkers=tuple(pool[p] for p in picks[1:]),
            )
        )
    return plans


@dataclass(frozen=True, eq=False)
class MixtureExample:
    """
    One training example. `mixture` is the 44.1 kHz capture (speech band
    plus FMCW echoes); `reference` is the clean target at the reference
    mic after the compensated front end, sample-aligned with it at 16 kHz.
    """

    plan: ExamplePlan
    mixture: MultichannelAudio
    reference: np.ndarray
    truth_times: np.ndarray
    truth_aoa: np.ndarray
    measured_snr_db: float


def _random_trajectory(
    rng: np.random.Generator,
    geometry: ArrayGeometry,
    room: RoomSpec,
    duration_s: float,
    moving: bool,
) -> SourceTrajectory:
    def point(azimuth: float) -> np.ndarray:
        for distance in np.linspace(rng.uniform(0.6, 1.6), 0.3, 8):
            p = geometry.point_at(azimuth, distance)
            if room.contains(p):
                return p
        raise ConfigError("room is too small for the array placement")

    azimuth = rng.uniform(15.0, 165.0)
    start = point(azimuth)
    if not moving:
        return SourceTrajectory.static(start)
    end = point(float(np.clip(azimuth + rng.uniform(-25.0, 25.0), 5.0, 175.0)))
    return SourceTrajectory(((0.0, start), (duration_s, end)))


def render_example(
    plan: ExamplePlan,
    corpus: Corpus,
    config: DatasetConfig,
    geometry: ArrayGeometry,
    room: RoomSpec,
    chirp: ChirpConfig,
) -> MixtureExample:
    rng = np.random.default_rng(plan.seed)
    duration = config.segment_s
    talkers = (plan.target_talker,) + plan.interferer_talkers
    sources = []
    for k, talker in enumerate(talkers):
        moving = bool(rng.random() < config.moving_fraction)
        trajectory = _random_trajectory(rng, geometry, room, duration, moving)
        dry = corpus.utterance(talker, duration, int(rng.integers(2**31 - 1)) + k)
        sources.append((dry, trajectory))
    _, truth = render_scene(sources, room, geometry, CAPTURE_RATE)

    target = truth.components[0]
    noise_seed = int(rng.integers(2**31 - 1))
    floor = white_noise(geometry.mic_count, target.frames, CAPTURE_RATE, noise_seed)
    if plan.interferers:
        # floor sits below the target before the joint scaling to the SNR
        rms = np.sqrt(np.mean(target.samples[0] ** 2))
        floor = floor.with_samples(rms * 10 ** (config.noise_db / 20) * floor.samples)
    mix = mix_at_snr(target, truth.components[1:], floor, plan.snr_db)
    residual = mix.residual.samples
    snr = measured_snr_db(target, mix.residual)

    echoes = simulate_fmcw_scene(
        chirp,
        sources[0][1],
        geometry,
        duration_s=target.frames / CAPTURE_RATE,
        reflector_gain=config.reflector_gain,
    )
    mixture = target.samples + residual + echoes.samples
    reference = front_end(target).speech.samples[0]
    return MixtureExample(
        plan,
        MultichannelAudio(mixture, CAPTURE_RATE),
        reference,
        truth.times,
        truth.aoa_track,
        snr,
    )


MANIFEST_FIELDS = (
    "example_id",
    "split",
    "seed",
    "snr_db",
    "interferers",
    "target_talker",
    "path",
)


def build_dataset(
    out_dir: str | Path,
    corpus: Corpus,
    config: DatasetConfig,
    geometry: ArrayGeometry,
    room: RoomSpec,
    chirp: ChirpConfig,
    seed: int,
) -> Path:
    """Render every planned example to `out_dir`; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plans = sample_example_plans(corpus, config, seed)
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=MANIFEST_FIELDS)
        writer.writeheader()
        for n, plan in enumerate(plans, 1):
            example = render_example(plan, corpus, config, geometry, room, chirp)
            path = out / f"{plan.example_id}.npz"
            np.savez(
                path,
                mixture=example.mixture.samples.astype(np.float32),
                reference=example.reference,
                truth_times=example.truth_times,
                truth_aoa=example.truth_aoa,
                interferer_talkers=np.array(plan.interferer_talkers, dtype=str),
                measured_snr_db=example.measured_snr_db,
            )
            writer.writerow(
                {
                    "example_id": plan.example_id,
                    "split": plan.split,
                    "seed": plan.seed,
                    "snr_db": f"{example.measured_snr_db:.4f}",
                    "interferers": plan.interferers,
                    "target_talker": plan.target_talker,
                    "path": path.name,
                }
            )
            logger.debug("rendered %s (%d/%d)", plan.example_id, n, len(plans))
    logger.info("wrote %d examples to %s", len(plans), out)
    return manifest


def load_dataset(
    manifest_path: str | Path, split: str | None = None
) -> list[MixtureExample]:
    manifest = Path(manifest_path)
    if not manifest.is_file():
        raise DataError(f"dataset manifest {manifest} not found")
    examples = []
    with open(manifest, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            if split is not None and row["split"] != split:
                continue
            try:
                data = np.load(manifest.parent / row["path"])
            except OSError as err:
                raise DataError(f"cannot read example {row['path']}: {err}") from err
            plan = ExamplePlan(
                example_id=row["example_id"],
                split=row["split"],
                seed=int(row["seed"]),
                snr_db=float(row["snr_db"]),
                target_talker=row["target_talker"],
                interferer_talkers=tuple(str(t) for t in data["interferer_talkers"]),
            )
            examples.append(
                MixtureExample(
                    plan,
                    MultichannelAudio(data["mixture"], CAPTURE_RATE),
                    data["reference"],
                    data["truth_times"],
                    data["truth_aoa"],
                    float(data["measured_snr_db"]),
                )
            )
    return examples


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TrainingItem:
    """An example converted to separator inputs and per-frame targets."""

    example_id: str
    inputs: SeparatorInputs
    reference: np.ndarray
    aoa: np.ndarray
    mixture_reference: np.ndarray
    snr_db: float
    interferers: int
    spectrum: ComplexSpectrogram | None = None


def prepare_items(
    examples: Iterable[MixtureExample],
    model: SpatialSeparatorModel,
    geometry: ArrayGeometry,
    chirp: ChirpConfig,
    grid: GridConfig = GridConfig(),
    keep_spectrum: bool = False,
) -> list[TrainingItem]:
    """
    Front end, profiles and pre-mask inputs for every example.

    `keep_spectrum` retains the multichannel STFT, which the beamforming
    baseline needs.
    """
    items = []
    for example in examples:
        front = front_end(example.mixture)
        frames = model.stft.frame_count(front.speech.frames)
        aoa = np.interp(
            frame_times(model.stft, frames), example.truth_times, example.truth_aoa
        )
        extracted = extract_inputs(front, model, geometry, chirp, grid, aoa_track=aoa)
        items.append(
            TrainingItem(
                example.plan.example_id,
                extracted.inputs,
                example.reference,
                aoa,
                front.speech.samples[0],
                example.measured_snr_db,
                example.plan.interferers,
                extracted.spec if keep_spectrum else None,
            )
        )
    return items


def item_loss(
    model: SpatialSeparatorModel, item: TrainingItem, aoa_weight: float
) -> tuple[LossTerms, Tensor]:
    out = model.forward(item.inputs)
    waveform = istft_tensor(
        out.target_real, out.target_imag, model.stft, len(item.reference)
    )
    terms = multitask_loss(waveform, item.reference, out.aoa, item.aoa, aoa_weight)
    return terms, waveform


@dataclass
class TrainResult:
    best_checkpoint: Path
    last_checkpoint: Path
    metric_log: Path
    epochs_run: int
    best_val_sisnr_db: float
    history: list[dict[str, Any]] = field(default_factory=list)


def _save_optimizer(path: Path, state: T.AdamState) -> None:
    arrays = {f"m/{k}": v for k, v in state.m.items()}
    arrays |= {f"v/{k}": v for k, v in state.v.items()}
    np.savez(path, step=state.step, **arrays)


def _load_optimizer(path: Path) -> T.AdamState:
    with np.load(path) as data:
        m = {k[2:]: data[k] for k in data.files if k.startswith("m/")}
        v = {k[2:]: data[k] for k in data.files if k.startswith("v/")}
        return T.AdamState(int(data["step"]), m, v)


def evaluate_items(
    model: SpatialSeparatorModel, items: Sequence[TrainingItem]
) -> tuple[float, float | None]:
    """Mean output SiSNR and mean AoA error (None without an AoA head)."""
    scores, errors = [], []
    for item in items:
        out = model.forward(item.inputs)
        waveform = istft_tensor(
            out.target_real, out.target_imag, model.stft, len(item.reference)
        )
        scores.append(sisnr(waveform.data, item.reference))
        if out.aoa is not None:
            errors.append(float(np.mean(np.abs(out.aoa.data - item.aoa))))
    return float(np.mean(scores)), (float(np.mean(errors)) if errors else None)


def train(
    model: SpatialSeparatorModel,
    train_items: Sequence[TrainingItem],
    val_items: Sequence[TrainingItem],
    config: TrainConfig,
    out_dir: str | Path,
    resume: bool = False,
) -> TrainResult:
    """
    Adam with a step schedule and early stopping on validation SiSNR.

    Writes `best.sstw` (best validation SiSNR), `last.sstw` plus
    `last.adam.npz` (for resuming) and `metrics.jsonl` to `out_dir`.
    With `resume`, training continues from `last.sstw` and its epoch.

    Raises
    ------
    DivergenceError
        A training loss is not finite.
    """
    if not train_items or not val_items:
        raise ConfigError("training needs non-empty train and validation sets")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    best_path, last_path = out / "best.sstw", out / "last.sstw"
    optimizer_path, log_path = out / "last.adam.npz", out / "metrics.jsonl"

    start_epoch, best, stale = 1, -np.inf, 0
    state: T.AdamState | None = None
    if resume:
        restored, manifest = SpatialSeparatorModel.load(
            last_path, model.geometry, model.stft
        )
        model.load_state_dict(restored.state_dict())
        state = _load_optimizer(optimizer_path)
        start_epoch = int(manifest["epoch"]) + 1
        best = float(manifest["best_val_sisnr_db"])
        stale = int(manifest["stale_epochs"])
        logger.info("resuming at epoch %d", start_epoch)
    elif log_path.exists():
        log_path.unlink()

    rng = np.random.default_rng(config.seed)
    history: list[dict[str, Any]] = []
    epoch = start_epoch - 1
    with T.precision(config.precision):
        for p in model.params.values():
            p.data = p.data.astype(T.current_precision())
        for epoch in range(start_epoch, config.max_epochs + 1):
            started = time.perf_counter()
            lr = config.lr_at(epoch)
            order = np.random.default_rng([config.seed, epoch]).permutation(
                len(train_items)
            )
            losses, separation, localization = [], [], []
            for b in range(ceil(len(order) / config.batch_size)):
                batch = [
                    train_items[i]
                    for i in order[b * config.batch_size : (b + 1) * config.batch_size]
                ]
                model.zero_grad()
                for item in batch:
                    with T.Tape() as tape:
                        terms, _ = item_loss(model, item, config.aoa_weight)
                    value = terms.total.item()
                    if not np.isfinite(value):
                        logger.error(
                            "non-finite loss at epoch %d on %s: separation=%s "
                            "localization=%s",
                            epoch,
                            item.example_id,
                            terms.separation,
                            terms.localization,
                        )
                        raise DivergenceError(
                            "training loss is not finite",
                            epoch=epoch,
                            example=item.example_id,
                            loss=value,
                        )
                    tape.backward(terms.total)
                    losses.append(value)
                    separation.append(terms.separation)
                    if terms.localization is not None:
                        localization.append(terms.localization)
                params = model.state_dict()
                grads = {
                    k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                    / len(batch)
                    for k, p in model.params.items()
                }
                updated, state = T.adam_step(params, grads, state, lr)
                for k, value_array in updated.items():
                    model.params[k].data = value_array
            model.zero_grad()

            val_sisnr, val_aoa = evaluate_items(model, val_items)
            wall_ms = (time.perf_counter() - started) * 1e3
            rows = [
                {
                    "epoch": epoch,
                    "split": "train",
                    "sisnr_db": -float(np.mean(separation)),
                    "loss": float(np.mean(losses)),
                    "aoa_err_deg": float(np.mean(localization))
                    if localization
                    else None,
                    "lr": lr,
                    "wall_ms": wall_ms,
                },
                {
                    "epoch": epoch,
                    "split": "val",
                    "sisnr_db": val_sisnr,
                    "aoa_err_deg": val_aoa,
                    "lr": lr,
                    "wall_ms": wall_ms,
                },
            ]
            with open(log_path, "a", encoding="utf-8") as f:
                for row in rows:
                    f.write(json.dumps(row) + "\n")
            history += rows
            logger.info(
                "epoch %d: train loss %.3f, val SiSNR %.2f dB, val AoA error %s",
                epoch,
                rows[0]["loss"],
                val_sisnr,
                "n/a" if val_aoa is None else f"{val_aoa:.2f} deg",
            )

            if val_sisnr > best + config.min_improvement_db:
                best, stale = val_sisnr, 0
                model.save(best_path, {"epoch": epoch, "val_sisnr_db": val_sisnr})
            else:
                stale += 1
            model.save(
                last_path,
                {"epoch": epoch, "best_val_sisnr_db": best, "stale_epochs": stale},
            )
            assert state is not None
            _save_optimizer(optimizer_path, state)
            if stale >= config.patience:
                logger.info("no improvement for %d epochs, stopping", stale)
                break

    return TrainResult(best_path, last_path, log_path, epoch, best, history)


# --------------------------------------------------------------------------
# Evaluation tables
# --------------------------------------------------------------------------


def snr_bucket(snr_db: float) -> str:
    for name, upper in SNR_BUCKETS:
        if snr_db < upper:
            return name
    return SNR_BUCKETS[-1][0]


def interferer_group(count: int) -> str:
    return INTERFERER_GROUPS[min(count, 2)]


@dataclass(frozen=True)
class EvalRow:
    example_id: str
    method: str
    snr_db: float
    interferers: int
    sisnr_in_db: float
    sisnr_out_db: float
    aoa_err_deg: float | None = None

    @property
    def improvement_db(self) -> float:
        return self.sisnr_out_db - self.sisnr_in_db


def evaluate_method(
    method: str,
    items: Sequence[TrainingItem],
    model: SpatialSeparatorModel | None = None,
    geometry: ArrayGeometry | None = None,
) -> list[EvalRow]:
    """
    Score one separation method per item: "mixture" (no processing),
    "mvdr" (steered at the mean true AoA) or "model".
    """
    rows = []
    for item in items:
        sisnr_in = sisnr(item.mixture_reference, item.reference)
        aoa_err = None
        match method:
            case "mixture":
                estimate = item.mixture_reference
            case "mvdr":
                if geometry is None:
                    raise ConfigError("mvdr evaluation needs the array geometry")
                estimate = _mvdr_estimate(item, geometry)
            case "model":
                if model is None:
                    raise ConfigError("model evaluation needs a checkpoint")
                out = model.forward(item.inputs)
                estimate = istft_tensor(
                    out.target_real, out.target_imag, model.stft, len(item.reference)
                ).data
                if out.aoa is not None:
                    aoa_err = float(np.mean(np.abs(out.aoa.data - item.aoa)))
            case _:
                raise ConfigError(f"unknown evaluation method '{method}'")
        rows.append(
            EvalRow(
                item.example_id,
                method,
                item.snr_db,
                item.interferers,
                sisnr_in,
                sisnr(np.asarray(estimate, dtype=float), item.reference),
                aoa_err,
            )
        )
    return rows


def _mvdr_estimate(item: TrainingItem, geometry: ArrayGeometry) -> np.ndarray:
    if item.spectrum is None:
        raise ConfigError("mvdr evaluation needs items prepared with keep_spectrum")
    out = mvdr_beamform(item.spectrum, geometry, float(np.mean(item.aoa)))
    return istft(out, item.spectrum.config).samples[0][: len(item.reference)]


def summarize(rows: Sequence[EvalRow]) -> dict[str, Any]:
    """Mean SiSNR in/out/improvement per method, SNR bucket and interferer group."""

    def stats(group: list[EvalRow]) -> dict[str, Any]:
        errors = [r.aoa_err_deg for r in group if r.aoa_err_deg is not None]
        return {
            "count": len(group),
            "sisnr_in_db": float(np.mean([r.sisnr_in_db for r in group])),
            "sisnr_out_db": float(np.mean([r.sisnr_out_db for r in group])),
            "improvement_db": float(np.mean([r.improvement_db for r in group])),
            "median_improvement_db": float(
                np.median([r.improvement_db for r in group])
            ),
            "aoa_err_deg": float(np.mean(errors)) if errors else None,
        }

    table: dict[str, Any] = {}
    for method in sorted({r.method for r in rows}):
        mine = [r for r in rows if r.method == method]
        by_snr = {
            name: stats(g)
            for name, _ in SNR_BUCKETS
            if (g := [r for r in mine if snr_bucket(r.snr_db) == name])
        }
        by_count = {
            name: stats(g)
            for name in INTERFERER_GROUPS
            if (g := [r for r in mine if interferer_group(r.interferers) == name])
        }
        table[method] = {
            "overall": stats(mine),
            "by_snr": by_snr,
            "by_interferers": by_count,
        }
    return table


def write_tables(summary: dict[str, Any], out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    json_path, csv_path = out / "eval.json", out / "eval.csv"
    json_path.write_text(json.dumps(summary, indent=2))
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(EVAL_COLUMNS)
        for method, table in summary.items():
            groups = [("overall", "all", table["overall"])]
            groups += [("snr", k, v) for k, v in table["by_snr"].items()]
            by_count = table["by_interferers"].items()
            groups += [("interferers", k, v) for k, v in by_count]
            for grouping, name, s in groups:
                writer.writerow(
                    [
                        method,
                        grouping,
                        name,
                        s["count"],
                        f"{s['sisnr_in_db']:.3f}",
                        f"{s['sisnr_out_db']:.3f}",
                        f"{s['improvement_db']:.3f}",
                        "" if s["aoa_err_deg"] is None else f"{s['aoa_err_deg']:.3f}",
                    ]
                )
    return json_path, csv_path
