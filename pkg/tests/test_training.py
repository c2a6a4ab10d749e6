import csv
import json
from dataclasses import replace
from math import ceil

import numpy as np
import pytest
from scipy import stats

import SST.tensor as T
from SST.audio import CAPTURE_RATE, SPEECH_RATE, MultichannelAudio, save_wav
from SST.errors import (
    ConfigError,
    DataError,
    DivergenceError,
    ShapeError,
    UndefinedMetricError,
)
from SST.inaudible import ChirpConfig
from SST.network import SpatialSeparatorModel
from SST.simulate import RoomSpec
from SST.training import (
    DatasetConfig,
    EvalRow,
    ExamplePlan,
    SyntheticCorpus,
    TrainConfig,
    TrainingItem,
    WavCorpus,
    aoa_loss,
    build_dataset,
    evaluate_items,
    evaluate_method,
    get_corpus,
    interferer_group,
    load_dataset,
    multitask_loss,
    render_example,
    sample_example_plans,
    sisnr,
    sisnr_tensor,
    snr_bucket,
    split_talkers,
    summarize,
    train,
    write_tables,
)

SHAPES = ((6, 19), (5, 19))


def quadrature(n=1600, cycles=20):
    t = np.arange(n) / n
    return np.sin(2 * np.pi * cycles * t), np.cos(2 * np.pi * cycles * t)


@pytest.fixture
def lps_model(tiny_model_config, geometry, stft_config):
    separator = replace(tiny_model_config.separator, conditioning="lps")
    config = replace(tiny_model_config, separator=separator)
    return SpatialSeparatorModel(config, geometry, stft_config, *SHAPES, seed=1)


@pytest.fixture
def items(make_inputs, rng):
    built = []
    for n in range(3):
        inputs = make_inputs(12)
        reference = rng.standard_normal(inputs.length)
        built.append(
            TrainingItem(
                f"item{n}",
                inputs,
                reference,
                np.full(12, 90.0),
                reference + rng.standard_normal(inputs.length),
                0.0,
                1,
            )
        )
    return built


class TestSisnr:
    def test_known_value(self):
        """An orthogonal error at a tenth of the amplitude scores 20 dB."""
        x, y = quadrature()
        assert sisnr(x + 0.1 * y, x) == pytest.approx(20.0, abs=1e-6)

    def test_scale_and_offset_invariance(self):
        """Gain and DC offset of the estimate do not change the score."""
        x, y = quadrature()
        assert sisnr(3.0 * (x + 0.1 * y) + 0.7, x) == pytest.approx(20.0, abs=1e-6)

    @pytest.mark.parametrize("reference", [np.zeros(100), np.full(100, 2.0)])
    def test_undefined(self, reference):
        """References that vanish after mean removal have no SiSNR."""
        with pytest.raises(UndefinedMetricError):
            sisnr(np.ones(100), reference)

    def test_shapes(self):
        """Estimate and reference must be equally long vectors."""
        with pytest.raises(ShapeError):
            sisnr(np.ones(10), np.ones(11))

    def test_tensor_matches_numpy(self, rng):
        """The tape version computes the same value."""
        estimate, reference = rng.standard_normal(200), rng.standard_normal(200)
        value = sisnr_tensor(T.Tensor(estimate), reference).item()
        assert value == pytest.approx(sisnr(estimate, reference), abs=1e-9)

    def test_tensor_gradient(self, rng):
        """The tape version has correct gradients."""
        reference = rng.standard_normal(64)
        estimate = T.Tensor(reference + rng.standard_normal(64), requires_grad=True)
        error = T.grad_check(lambda e: sisnr_tensor(e, reference), [estimate])
        assert error < 1e-5


class TestLosses:
    def test_aoa_loss(self):
        """The AoA term is a mean absolute error in degrees."""
        loss = aoa_loss(T.Tensor([10.0, 20.0]), np.array([12.0, 18.0]))
        assert loss.item() == pytest.approx(2.0)
        with pytest.raises(ShapeError):
            aoa_loss(T.Tensor([10.0]), np.array([1.0, 2.0]))

    def test_multitask_weighting(self):
        """Total loss is -SiSNR plus the weighted AoA error."""
        x, y = quadrature()
        estimate = T.Tensor(x + 0.1 * y)
        terms = multitask_loss(
            estimate, x, T.Tensor([10.0, 20.0]), np.array([12.0, 18.0]), 0.5
        )
        assert terms.separation == pytest.approx(-20.0, abs=1e-6)
        assert terms.localization == pytest.approx(2.0)
        assert terms.total.item() == pytest.approx(-19.0, abs=1e-6)

    def test_without_aoa_head(self):
        """Models without an AoA head train on separation alone."""
        x, y = quadrature()
        terms = multitask_loss(T.Tensor(x + 0.1 * y), x, None, None, 0.5)
        assert terms.localization is None
        assert terms.total.item() == pytest.approx(terms.separation)


class TestConfigs:
    def test_lr_schedule(self):
        """The rate halves at each milestone."""
        config = TrainConfig()
        assert config.lr_at(39) == pytest.approx(1e-4)
        assert config.lr_at(40) == pytest.approx(5e-5)
        assert config.lr_at(75) == pytest.approx(2.5e-5)

    @pytest.mark.parametrize(
        "kwargs",
        [{"lr": -1.0}, {"patience": 0}, {"batch_size": 0}, {"precision": "float16"}],
    )
    def test_invalid_train(self, kwargs):
        """Impossible training settings are configuration errors."""
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"talkers": 1},
            {"test_fraction": 1.0},
            {"snr_min_db": 7.0},
            {"interferers_min": 4},
            {"segment_s": 0.0},
        ],
    )
    def test_invalid_dataset(self, kwargs):
        """Impossible dataset settings are configuration errors."""
        with pytest.raises(ConfigError):
            DatasetConfig(**kwargs)


class TestCorpora:
    def test_synthetic(self):
        """Synthetic talkers are named in order and deterministic in the seed."""
        corpus = get_corpus(None, 3)
        assert isinstance(corpus, SyntheticCorpus)
        assert corpus.talkers == ["synthetic-000", "synthetic-001", "synthetic-002"]
        a = corpus.utterance("synthetic-001", 0.1, seed=4)
        assert len(a) == round(0.1 * CAPTURE_RATE)
        np.testing.assert_array_equal(a, corpus.utterance("synthetic-001", 0.1, 4))

    def test_wav_directory(self, tmp_path):
        """16 kHz recordings are resampled and normalized to 0.1 RMS."""
        t = np.arange(8000) / SPEECH_RATE
        speech = MultichannelAudio(0.5 * np.sin(2 * np.pi * 300 * t), SPEECH_RATE)
        (tmp_path / "alice").mkdir()
        save_wav(speech, tmp_path / "alice" / "one.wav")
        corpus = WavCorpus(tmp_path)
        assert corpus.talkers == ["alice"]
        clip = corpus.utterance("alice", 0.2, seed=1)
        assert len(clip) == round(0.2 * CAPTURE_RATE)
        assert np.sqrt(np.mean(clip**2)) == pytest.approx(0.1)

    def test_empty_directory(self, tmp_path):
        """A directory without talker folders is rejected."""
        with pytest.raises(ConfigError):
            WavCorpus(tmp_path)


class TestPlans:
    def test_talker_split(self):
        """Train and test talkers are disjoint; the test set takes the last ones."""
        split = split_talkers([f"t{i}" for i in range(10)], 0.2)
        assert split["test"] == ["t8", "t9"]
        assert not set(split["train"]) & set(split["test"])

    def test_plans(self):
        """Plans respect the configured ranges and the talker split."""
        corpus = SyntheticCorpus(10)
        config = DatasetConfig(examples=40, interferers_max=2)
        plans = sample_example_plans(corpus, config, seed=7)
        assert plans == sample_example_plans(corpus, config, seed=7)
        test = [p for p in plans if p.split == "test"]
        assert len(test) == 8
        test_talkers = set(split_talkers(corpus.talkers, 0.2)["test"])
        for plan in plans:
            talkers = {plan.target_talker, *plan.interferer_talkers}
            assert (plan.split == "test") == talkers.issubset(test_talkers)
            assert 0 <= plan.interferers <= 2
            assert -6.0 <= plan.snr_db <= 6.0

    def test_interferer_counts_are_uniform(self):
        """Interferer counts follow a uniform distribution over 0..3."""
        plans = sample_example_plans(
            SyntheticCorpus(10), DatasetConfig(examples=4000), seed=11
        )
        counts = np.bincount([plan.interferers for plan in plans], minlength=4)
        assert len(counts) == 4
        assert stats.chisquare(counts).pvalue > 0.01


class TestDataset:
    def test_build_and_load(self, tmp_path, geometry):
        """Rendered examples come back with their manifest rows."""
        config = DatasetConfig(
            examples=2, talkers=2, segment_s=0.25, test_fraction=0.5, interferers_max=1
        )
        manifest = build_dataset(
            tmp_path,
            SyntheticCorpus(2),
            config,
            geometry,
            RoomSpec(),
            ChirpConfig(),
            seed=3,
        )
        with open(manifest, newline="") as f:
            rows = list(csv.DictReader(f))
        assert [r["split"] for r in rows] == ["train", "test"]

        examples = load_dataset(manifest)
        assert len(examples) == 2
        test_split = load_dataset(manifest, "test")
        assert [e.plan.example_id for e in test_split] == ["ex00001"]
        for row, example in zip(rows, examples):
            assert example.mixture.sample_rate == CAPTURE_RATE
            assert example.mixture.channel_count == 4
            assert len(example.reference) == ceil(example.mixture.frames * 160 / 441)
            assert float(row["snr_db"]) == pytest.approx(
                example.measured_snr_db, abs=1e-4
            )
            assert example.truth_aoa.shape == example.truth_times.shape

    @pytest.mark.parametrize("interferers", [0, 2])
    def test_measured_snr_matches_plan(self, geometry, interferers):
        """The noise floor is part of the residual scaled to the planned SNR."""
        corpus = SyntheticCorpus(3)
        plan = ExamplePlan(
            example_id="ex00000",
            split="train",
            seed=5,
            snr_db=-6.0,
            target_talker=corpus.talkers[0],
            interferer_talkers=tuple(corpus.talkers[1 : 1 + interferers]),
        )
        config = DatasetConfig(examples=1, talkers=3, segment_s=0.25)
        example = render_example(
            plan, corpus, config, geometry, RoomSpec(), ChirpConfig()
        )
        assert example.measured_snr_db == pytest.approx(-6.0, abs=0.01)

    def test_missing_manifest(self, tmp_path):
        """Loading a dataset that was never built is a data error."""
        with pytest.raises(DataError):
            load_dataset(tmp_path / "manifest.csv")


class TestTraining:
    def test_early_stop(self, lps_model, items, tmp_path):
        """Without learning, validation stalls and training stops."""
        config = TrainConfig(lr=0.0, patience=1, max_epochs=10, precision="float64")
        result = train(lps_model, items[:2], items[2:], config, tmp_path)
        assert result.epochs_run == 2
        assert result.best_checkpoint.exists() and result.last_checkpoint.exists()
        lines = result.metric_log.read_text().splitlines()
        assert [json.loads(line)["split"] for line in lines] == [
            "train",
            "val",
            "train",
            "val",
        ]
        assert json.loads(lines[1])["sisnr_db"] == pytest.approx(
            result.best_val_sisnr_db
        )

    def test_resume(self, lps_model, items, geometry, stft_config, tmp_path):
        """A resumed run continues at the next epoch and appends to the log."""
        config = TrainConfig(lr=1e-3, max_epochs=1, batch_size=2, precision="float64")
        train(lps_model, items[:2], items[2:], config, tmp_path)
        fresh = SpatialSeparatorModel(
            lps_model.config, geometry, stft_config, *SHAPES, seed=99
        )
        result = train(
            fresh,
            items[:2],
            items[2:],
            replace(config, max_epochs=2),
            tmp_path,
            resume=True,
        )
        assert result.epochs_run == 2
        assert [row["epoch"] for row in result.history] == [2, 2]
        assert len(result.metric_log.read_text().splitlines()) == 4

    def test_divergence(self, lps_model, items, tmp_path, mocker):
        """A non-finite loss stops training with a divergence error."""
        mocker.patch(
            "SST.training.sisnr_loss", return_value=T.Tensor(np.array(np.nan))
        )
        config = TrainConfig(precision="float64")
        with pytest.raises(DivergenceError) as caught:
            train(lps_model, items[:2], items[2:], config, tmp_path)
        assert caught.value.diagnostics["epoch"] == 1

    def test_needs_validation(self, lps_model, items, tmp_path):
        """Both splits must hold at least one item."""
        with pytest.raises(ConfigError):
            train(lps_model, items, [], TrainConfig(), tmp_path)

    def test_evaluate_items_reports_aoa(self, tiny_model_config, items, geometry):
        """Models with an AoA head report a localization error."""
        model = SpatialSeparatorModel(
            tiny_model_config, geometry, items[0].inputs.stft, *SHAPES
        )
        score, error = evaluate_items(model, items)
        assert np.isfinite(score)
        assert error is not None and 0.0 <= error <= 90.0


class TestEvaluation:
    @pytest.mark.parametrize(
        "snr, bucket",
        [(-6.0, "[-6,-2)"), (-2.0, "[-2,2)"), (1.99, "[-2,2)"), (2.0, "[2,6]")],
    )
    def test_snr_bucket(self, snr, bucket):
        assert snr_bucket(snr) == bucket

    @pytest.mark.parametrize("count, group", [(0, "0"), (1, "1"), (2, "2+"), (5, "2+")])
    def test_interferer_group(self, count, group):
        assert interferer_group(count) == group

    def test_mixture_baseline(self, items):
        """The unprocessed mixture has zero improvement."""
        rows = evaluate_method("mixture", items)
        assert [r.improvement_db for r in rows] == pytest.approx([0.0] * 3)

    @pytest.mark.parametrize("method", ["model", "mvdr", "oracle"])
    def test_method_requirements(self, items, method):
        """Methods without what they need are configuration errors."""
        with pytest.raises(ConfigError):
            evaluate_method(method, items)

    def test_tables(self, tmp_path):
        """Summaries group by method, SNR bucket and interferer count."""
        rows = [
            EvalRow("a", "mixture", -5.0, 0, -5.0, -5.0),
            EvalRow("b", "mixture", 3.0, 2, 3.0, 3.0),
            EvalRow("a", "model", -5.0, 0, -5.0, 1.0, 10.0),
            EvalRow("b", "model", 3.0, 2, 3.0, 9.0, 20.0),
        ]
        summary = summarize(rows)
        model = summary["model"]
        assert model["overall"]["count"] == 2
        assert model["overall"]["improvement_db"] == pytest.approx(6.0)
        assert model["overall"]["aoa_err_deg"] == pytest.approx(15.0)
        assert summary["mixture"]["overall"]["aoa_err_deg"] is None
        assert set(model["by_snr"]) == {"[-6,-2)", "[2,6]"}
        assert set(model["by_interferers"]) == {"0", "2+"}

        json_path, csv_path = write_tables(summary, tmp_path)
        assert json.loads(json_path.read_text()) == summary
        with open(csv_path, newline="") as f:
            table = list(csv.reader(f))
        assert table[0][0] == "method"
        assert len(table) == 11
        assert table[-5][:3] == ["model", "overall", "all"]
