import csv
import json
import logging

import numpy as np
import pytest

import SST.cli as cli
from SST.audible import MusicProfile
from SST.audio import MultichannelAudio, load_wav, save_wav
from SST.cli import build_parser, main, resolve_config
from SST.config import GlobalConfig, save_config
from SST.errors import DivergenceError
from SST.inaudible import RangeAoAProfile
from SST.network import SpatialSeparatorModel
from SST.profile_io import read_profile_binary
from SST.safe import Err, Ok


@pytest.fixture(autouse=True)
def restore_logging():
    """`main` installs its own handlers on the package logger."""
    yield
    root = logging.getLogger("SST")
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()
    root.propagate = True
    root.setLevel(logging.NOTSET)


SCENE = """\
duration_s = 0.3
snr_db = 3.0
seed = 5

[room]
dimensions = [5.0, 4.0, 3.0]
reflection_coefficient = 0.3
max_image_order = 1

[[sources]]
azimuth_deg = 70.0
distance_m = 1.0

[[sources]]
azimuth_deg = 130.0
distance_m = 1.5

[fmcw]
enabled = true
reflector_gain = 0.05
"""


class TestParser:
    def test_global_options(self):
        """Global options come before the command."""
        args = build_parser().parse_args(
            ["--preset", "tiny", "--seed", "3", "-vv", "bench", "--duration", "0.5"]
        )
        assert args.command == "bench"
        assert args.preset == "tiny"
        assert args.verbose == 2
        assert args.duration == 0.5

    def test_unknown_preset(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["--preset", "huge", "bench"])

    def test_command_required(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args([])

    def test_resolve_config(self):
        """Preset and base seed are applied on top of the file."""
        args = build_parser().parse_args(["--preset", "tiny", "--seed", "3", "bench"])
        config = resolve_config(args)
        assert config.separator.channels == 16
        assert config.seeds.train == 3002
        assert config.stft == GlobalConfig().stft

    def test_paper_preset(self):
        """The full-size preset is selectable from the command line."""
        args = build_parser().parse_args(["--preset", "paper", "bench"])
        config = resolve_config(args)
        assert config.embedding.embed_dim == 512
        assert config.aoa_head.lstm_hidden == 128
        assert config.separator.channels == 128


class TestExitCodes:
    def test_missing_config(self, tmp_path):
        """Configuration errors exit with code 2."""
        assert main(["--config", str(tmp_path / "absent.toml"), "bench"]) == 2

    def test_unknown_key(self, tmp_path, capsys):
        path = tmp_path / "bad.toml"
        path.write_text("[train]\nlearning_rate = 0.1\n")
        assert main(["--config", str(path), "bench"]) == 2
        assert "train.learning_rate" in capsys.readouterr().out

    def test_missing_checkpoint(self, tmp_path):
        """Missing input files are data errors."""
        code = main(
            ["separate", str(tmp_path / "mix.wav"), str(tmp_path / "model.sstw")]
        )
        assert code == 3

    @pytest.mark.parametrize(
        "result, code", [(Ok(None), 0), (Err(DivergenceError("nan loss")), 4)]
    )
    def test_result_mapping(self, mocker, result, code):
        """The result of a command body picks the exit code."""
        mocker.patch.dict(cli.COMMANDS, {"bench": lambda args, config: result})
        assert main(["bench"]) == code


class TestCommands:
    def test_init_checkpoint(self, tmp_path, geometry, stft_config):
        """An identity checkpoint loads back with the preset it was built with."""
        out = tmp_path / "identity.sstw"
        args = ["--preset", "tiny", "init-checkpoint", str(out), "--identity"]
        assert main(args) == 0
        model, manifest = SpatialSeparatorModel.load(out, geometry, stft_config)
        assert manifest["identity"] is True
        assert model.config.separator.channels == 16

    def test_bench(self, tmp_path):
        """The benchmark writes a report and one telemetry line per block."""
        report = tmp_path / "bench.json"
        telemetry = tmp_path / "telemetry.jsonl"
        args = ["bench", "--duration", "0.2", "--out", str(report)]
        assert main(args + ["--telemetry", str(telemetry)]) == 0
        blocks = json.loads(report.read_text())["blocks"]
        assert blocks == 3
        assert len(telemetry.read_text().splitlines()) == blocks

    def test_config_file(self, tmp_path):
        """A saved configuration is accepted by --config."""
        path = save_config(GlobalConfig(), tmp_path / "settings.toml")
        out = tmp_path / "model.sstw"
        assert main(["--config", str(path), "init-checkpoint", str(out)]) == 0
        assert out.exists()

    @pytest.mark.slow
    def test_simulate_then_localize(self, tmp_path):
        """A simulated scene feeds the localization table."""
        scene = tmp_path / "scene.toml"
        scene.write_text(SCENE)
        out = tmp_path / "scene"
        assert main(["simulate", str(scene), str(out)]) == 0
        for name in ("mixture.wav", "target.wav", "truth.csv", "manifest.json"):
            assert (out / name).exists()
        assert json.loads((out / "manifest.json").read_text())["sources"] == 2

        table = tmp_path / "localize"
        args = ["localize", str(out / "mixture.wav"), "--truth", str(out / "truth.csv")]
        args += ["--oracle", str(out), "--out-dir", str(table)]
        assert main(args) == 0
        with open(table / "ablation.csv", newline="") as f:
            rows = list(csv.DictReader(f))
        assert [row["variant"] for row in rows] == ["unmasked-music", "masked-music"]
        assert all(row["mean_abs_error_deg"] for row in rows)

    def test_scene_missing_key(self, tmp_path, capsys):
        """An invalid scene file is a configuration error naming the key."""
        scene = tmp_path / "scene.toml"
        scene.write_text(SCENE.replace("reflection_coefficient = 0.3\n", ""))
        assert main(["simulate", str(scene), str(tmp_path / "out")]) == 2
        assert "reflection_coefficient" in capsys.readouterr().out

    def test_localize_exports_profiles(self, tmp_path, rng):
        """Both profile streams are exported and drawn as heatmaps."""
        mixture = tmp_path / "mix.wav"
        noise = 0.1 * rng.standard_normal((4, 22050))
        save_wav(MultichannelAudio(noise, 44100), mixture)
        profiles = tmp_path / "profiles"
        out = tmp_path / "localize"
        args = ["localize", str(mixture), "--out-dir", str(out), "--plot"]
        assert main(args + ["--export-profiles", str(profiles)]) == 0
        assert (out / "localize.png").exists()
        assert (out / "profiles.png").exists()

        audible = read_profile_binary(profiles / "audible-unmasked-music_0000.bin")
        assert isinstance(audible, MusicProfile)
        assert audible.shape == (103, 181)
        with open(profiles / "inaudible_index.csv", newline="") as f:
            rows = list(csv.DictReader(f))
        assert rows
        inaudible = read_profile_binary(profiles / f"{rows[0]['name']}.bin")
        assert isinstance(inaudible, RangeAoAProfile)
        assert (profiles / f"{rows[0]['name']}.csv").exists()

    def test_separate_identity(self, tmp_path, rng, capsys):
        """The identity checkpoint separates with and without a reference."""
        config = tmp_path / "settings.toml"
        config.write_text('[separator]\nconditioning = "lps"\n')
        common = ["--config", str(config), "--preset", "tiny"]
        checkpoint = tmp_path / "identity.sstw"
        assert main(common + ["init-checkpoint", str(checkpoint), "--identity"]) == 0

        mixture = tmp_path / "mix.wav"
        reference = tmp_path / "ref.wav"
        noise = 0.1 * rng.standard_normal((5, 8820))
        save_wav(MultichannelAudio(noise[:4], 44100), mixture)
        save_wav(MultichannelAudio(noise[4], 44100), reference)
        out = tmp_path / "target.wav"
        args = common + ["separate", str(mixture), str(checkpoint), "--out", str(out)]
        assert main(args) == 0
        assert load_wav(out).sample_rate == 16000
        assert "SiSNR" not in capsys.readouterr().out
        assert main(args + ["--reference", str(reference)]) == 0
        assert "improvement" in capsys.readouterr().out

    @pytest.mark.slow
    def test_simulate_is_deterministic(self, tmp_path):
        """The same scene and seed render the same capture."""
        scene = tmp_path / "scene.toml"
        scene.write_text(SCENE)
        for name in ("a", "b"):
            args = ["--seed", "4", "simulate", str(scene), str(tmp_path / name)]
            assert main(args) == 0
        first = load_wav(tmp_path / "a" / "mixture.wav").samples
        second = load_wav(tmp_path / "b" / "mixture.wav").samples
        np.testing.assert_array_equal(first, second)
