from dataclasses import replace

import numpy as np
import pytest

from SST.audible import GridConfig, MusicProfile
from SST.audio import (
    CAPTURE_RATE,
    SPEECH_RATE,
    MultichannelAudio,
    group_delay,
    stft,
    tracking_taps,
)
from SST.errors import ConfigError
from SST.inaudible import ChirpConfig
from SST.network import SpatialSeparatorModel
from SST.pipeline import (
    AoATrack,
    capture_sample_of_frame,
    extract_inputs,
    first_frame_after_sample,
    frame_times,
    front_end,
    model_track,
    music_track,
    profile_shapes,
    separate_audio,
    stack_profiles,
    tracking_profiles,
)
from SST.simulate import RoomSpec, SourceTrajectory, render_scene

SHAPES = ((6, 19), (5, 19))


@pytest.fixture
def capture(rng):
    return MultichannelAudio(0.1 * rng.standard_normal((4, 13230)), CAPTURE_RATE)


def lps_model(config, geometry, stft_config, conditioning="lps", identity=False):
    separator = replace(config.separator, conditioning=conditioning)
    build = SpatialSeparatorModel.identity if identity else SpatialSeparatorModel
    return build(
        replace(config, separator=separator), geometry, stft_config, *SHAPES, seed=4
    )


class TestFrontEnd:
    def test_compensated(self, capture):
        """The compensated front end resamples without trimming the capture."""
        front = front_end(capture)
        assert front.speech.sample_rate == SPEECH_RATE
        assert front.speech.channel_count == 4
        assert front.speech.frames == 4800
        assert front.tracking.samples.shape == capture.samples.shape
        assert front.sync_offset_s == 0.0

    def test_causal(self, capture):
        """The causal front end reports the tracking filter delay."""
        front = front_end(capture, compensate=False)
        assert front.speech.sample_rate == SPEECH_RATE
        expected = group_delay(tracking_taps()) / CAPTURE_RATE
        assert front.sync_offset_s == pytest.approx(expected)

    def test_speech_rate_passthrough(self, rng):
        """16 kHz input has no tracking band."""
        audio = MultichannelAudio(rng.standard_normal((4, 1600)), SPEECH_RATE)
        front = front_end(audio)
        assert front.speech is audio
        assert front.tracking is None

    def test_unsupported_rate(self):
        """Only the capture and speech rates are accepted."""
        with pytest.raises(ConfigError, match="8000"):
            front_end(MultichannelAudio(np.zeros((4, 800)), 8000))


class TestFrameMapping:
    def test_frame_times(self, stft_config):
        """Frames are stamped at their window centre."""
        times = frame_times(stft_config, 3)
        np.testing.assert_allclose(times, [0.016, 0.026, 0.036])

    def test_first_frame_after_sample(self, stft_config):
        """The mapping is the inverse of the newest sample of each frame."""
        samples = np.arange(0, 20000, 37)
        frames = first_frame_after_sample(stft_config, samples)
        newest = capture_sample_of_frame(stft_config, int(frames.max()) + 1)
        assert np.all(newest[frames] >= samples)
        earlier = frames > 0
        assert np.all(newest[frames[earlier] - 1] < samples[earlier])

    def test_early_samples_map_to_frame_zero(self, stft_config):
        assert first_frame_after_sample(stft_config, 0) == 0


class TestProfiles:
    def test_shapes(self):
        """Profile shapes follow the grid axes."""
        grid = GridConfig()
        audible, inaudible = profile_shapes(grid)
        assert audible == (len(grid.freq_axis), len(grid.angle_axis))
        assert inaudible == (len(grid.range_axis), len(grid.angle_axis))

    def test_stack(self):
        axes = (np.arange(6.0), np.arange(19.0))
        profiles = [MusicProfile(np.ones((6, 19)), *axes) for _ in range(3)]
        assert stack_profiles(profiles, (6, 19), (2, 4)).shape == (3, 3, 5)

    def test_stack_empty(self):
        """No profiles stack to an empty array of the pooled shape."""
        assert stack_profiles([], (6, 19), (2, 4)).shape == (0, 3, 5)

    def test_no_tracking_band(self, rng, geometry):
        """16 kHz input has no range-angle profiles."""
        audio = MultichannelAudio(rng.standard_normal((4, 1600)), SPEECH_RATE)
        assert tracking_profiles(front_end(audio), ChirpConfig(), geometry) == []


class TestAoATrack:
    def test_mean_error_skips_gaps(self):
        track = AoATrack("music", np.array([0.0, 1.0, 2.0]), np.array([10, np.nan, 30]))
        error = track.mean_error(np.array([0.0, 2.0]), np.array([20.0, 20.0]))
        assert error == pytest.approx(10.0)

    def test_no_estimates(self):
        track = AoATrack("music", np.array([0.0]), np.array([np.nan]))
        assert track.mean_error(np.array([0.0]), np.array([0.0])) is None

    def test_music_track(self, geometry, stft_config, rng):
        """A single free-field talker is tracked at its azimuth."""
        source = SourceTrajectory.static(geometry.point_at(60.0, 1.5))
        _, truth = render_scene(
            [(rng.standard_normal(9600), source)],
            RoomSpec(max_image_order=0),
            geometry,
            SPEECH_RATE,
        )
        track = music_track(stft(truth.components[0], stft_config), geometry)
        assert len(track.times) == 1
        assert len(track.profiles) == 1
        assert track.mean_error(track.times, np.full(1, 60.0)) < 3.0


class TestSeparation:
    def test_identity_model(self, tiny_model_config, geometry, stft_config, capture):
        """An identity checkpoint returns the reference microphone."""
        model = lps_model(tiny_model_config, geometry, stft_config, identity=True)
        target, aoa = separate_audio(capture, model, geometry, ChirpConfig())
        reference = front_end(capture).speech.samples[0]
        assert aoa is None
        assert target.sample_rate == SPEECH_RATE
        assert target.frames == len(reference)
        inner = slice(stft_config.win_samples, -stft_config.win_samples)
        np.testing.assert_allclose(
            target.samples[0][inner], reference[inner], atol=1e-6
        )

    def test_lps_inputs(self, tiny_model_config, geometry, stft_config, capture):
        """Models without embeddings skip the profiles."""
        model = lps_model(tiny_model_config, geometry, stft_config)
        extracted = extract_inputs(front_end(capture), model, geometry, ChirpConfig())
        assert extracted.audible == []
        assert extracted.inaudible == []
        assert extracted.inputs.fixed_premask is None
        assert extracted.inputs.reference.shape == extracted.spec.bins[0].shape

    def test_aoa_needs_track(self, tiny_model_config, geometry, stft_config, capture):
        model = lps_model(tiny_model_config, geometry, stft_config, "aoa")
        with pytest.raises(ConfigError, match="AoA track"):
            extract_inputs(front_end(capture), model, geometry, ChirpConfig())

    def test_aoa_track_premask(
        self, tiny_model_config, geometry, stft_config, capture
    ):
        """A per-frame AoA track becomes a fixed pre-mask."""
        model = lps_model(tiny_model_config, geometry, stft_config, "aoa")
        front = front_end(capture)
        frames = stft_config.frame_count(front.speech.frames)
        extracted = extract_inputs(
            front, model, geometry, ChirpConfig(), aoa_track=np.full(frames, 90.0)
        )
        premask = extracted.inputs.fixed_premask
        assert premask.shape == extracted.inputs.reference.shape
        assert np.all(np.isfinite(premask))

    def test_model_track_needs_head(
        self, tiny_model_config, geometry, stft_config, capture
    ):
        """Only embedding models carry an AoA head."""
        model = lps_model(tiny_model_config, geometry, stft_config)
        with pytest.raises(ConfigError, match="no AoA head"):
            model_track(front_end(capture), model, geometry, ChirpConfig())
