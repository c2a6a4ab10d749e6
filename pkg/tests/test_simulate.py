import numpy as np
import pytest

from SST.audio import CAPTURE_RATE, SPEECH_RATE, MultichannelAudio
from SST.errors import ConfigError, ShapeError, UndefinedSNRError
from SST.inaudible import ChirpConfig
from SST.simulate import (
    ArrayGeometry,
    RoomSpec,
    SourceTrajectory,
    TalkerVoice,
    measured_snr_db,
    mix_at_snr,
    parse_scene_spec,
    read_truth_csv,
    render_scene,
    render_scene_spec,
    simulate_fmcw_scene,
    simulate_rir,
    synthetic_speech,
    white_noise,
    write_truth_csv,
)

FREE_FIELD = RoomSpec(max_image_order=0)


class TestArrayGeometry:
    def test_linear_default(self, geometry):
        """Four microphones along +x with 0/3/5/8 cm offsets."""
        assert geometry.mic_count == 4
        np.testing.assert_allclose(geometry.projections, [0.0, 0.03, 0.05, 0.08])
        np.testing.assert_allclose(geometry.axis, [1.0, 0.0, 0.0])
        np.testing.assert_allclose(geometry.broadside, [0.0, 1.0, 0.0])

    @pytest.mark.parametrize("azimuth", [10.0, 60.0, 90.0, 155.0])
    def test_point_at_inverts_azimuth(self, geometry, azimuth):
        """point_at and azimuth_of agree."""
        point = geometry.point_at(azimuth, 1.2)
        assert geometry.azimuth_of(point) == pytest.approx(azimuth)
        assert geometry.distances_to(point)[0] == pytest.approx(1.2)

    def test_needs_two_microphones(self):
        """A single microphone is not an array."""
        with pytest.raises(ConfigError):
            ArrayGeometry(((1.0, 1.0, 1.0),))

    def test_distinct_positions(self):
        """Coincident microphones are rejected."""
        with pytest.raises(ConfigError):
            ArrayGeometry(((1.0, 1.0, 1.0), (1.0, 1.0, 1.0)))

    def test_reference_in_range(self):
        """The reference index must name a microphone."""
        with pytest.raises(ConfigError):
            ArrayGeometry(((1.0, 1.0, 1.0), (1.1, 1.0, 1.0)), reference_index=2)


class TestRoomAndTrajectory:
    def test_reflection_coefficient_range(self):
        """Reflection coefficients must lie in [0, 1)."""
        with pytest.raises(ConfigError):
            RoomSpec(reflection_coefficient=1.0)

    def test_contains(self):
        """Walls are outside; the interior is inside."""
        room = RoomSpec((4.0, 4.0, 3.0))
        assert room.contains((1.0, 1.0, 1.0))
        assert not room.contains((0.0, 1.0, 1.0))
        assert not room.contains((1.0, 5.0, 1.0))

    def test_waypoint_interpolation(self):
        """Positions between waypoints are interpolated linearly."""
        path = SourceTrajectory(((0.0, (1.0, 1.0, 1.0)), (2.0, (3.0, 1.0, 1.0))))
        np.testing.assert_allclose(path.position_at(0.5), [1.5, 1.0, 1.0])
        assert path.covers(2.0)
        assert not path.covers(2.5)

    def test_times_must_increase(self):
        """Waypoint times are strictly increasing."""
        with pytest.raises(ConfigError):
            SourceTrajectory(((1.0, (1.0, 1.0, 1.0)), (1.0, (2.0, 1.0, 1.0))))


class TestImpulseResponse:
    def test_free_field(self):
        """Order zero keeps only the direct path at 1/d gain."""
        rir = simulate_rir(FREE_FIELD, (1.0, 1.0, 1.0), (2.0, 1.0, 1.0))
        assert rir.tap_count == 1
        assert rir.delays[0] == pytest.approx(1.0 / 343.0)
        assert rir.gains[0] == pytest.approx(1.0)

    def test_first_order_images(self):
        """First order adds one image per wall, sorted by delay."""
        room = RoomSpec(max_image_order=1, reflection_coefficient=0.5)
        rir = simulate_rir(room, (1.0, 1.0, 1.0), (2.0, 1.5, 1.2))
        assert rir.tap_count == 7
        assert np.all(np.diff(rir.delays) >= 0)
        assert rir.orders[0] == 0
        assert sorted(rir.orders.tolist()) == [0] + [1] * 6

    def test_source_outside(self):
        """Sources outside the room are a configuration error."""
        with pytest.raises(ConfigError):
            simulate_rir(FREE_FIELD, (9.0, 1.0, 1.0), (2.0, 1.0, 1.0))

    def test_filter_peak_at_delay(self):
        """The rendered filter peaks at the direct-path delay."""
        rir = simulate_rir(FREE_FIELD, (1.0, 1.0, 1.0), (2.0, 1.0, 1.0))
        h = rir.to_filter(CAPTURE_RATE)
        assert int(np.argmax(h)) == round(CAPTURE_RATE / 343.0)


class TestRenderScene:
    def test_mixture_is_sum_of_components(self, geometry, rng):
        """The mixture equals the sum of the rendered components."""
        left = SourceTrajectory.static(geometry.point_at(60, 1))
        right = SourceTrajectory.static(geometry.point_at(120, 1))
        dry = rng.standard_normal((2, 2205))
        sources = [(dry[0], left), (dry[1], right)]
        mixture, truth = render_scene(sources, FREE_FIELD, geometry)
        assert mixture.samples.shape == (4, 2205)
        np.testing.assert_allclose(
            mixture.samples, truth.components[0].samples + truth.components[1].samples
        )
        np.testing.assert_allclose(truth.aoa_track, 60.0)
        np.testing.assert_allclose(truth.aoa_tracks[1], 120.0)

    def test_moving_source_track(self, geometry):
        """A moving source produces a changing azimuth track."""
        start, end = geometry.point_at(40, 1.0), geometry.point_at(140, 1.0)
        path = SourceTrajectory(((0.0, start), (0.2, end)))
        dry = synthetic_speech(0.2, CAPTURE_RATE, seed=3)
        _, truth = render_scene([(dry, path)], FREE_FIELD, geometry)
        assert truth.aoa_track[0] == pytest.approx(40.0, abs=0.5)
        assert truth.aoa_track[-1] > 120.0
        assert np.all(np.diff(truth.aoa_track) > 0)

    def test_length_mismatch(self, geometry):
        """All dry signals must have the same length."""
        point = SourceTrajectory.static(geometry.point_at(90, 1))
        with pytest.raises(ShapeError):
            render_scene(
                [(np.zeros(10), point), (np.zeros(11), point)], FREE_FIELD, geometry
            )

    def test_source_outside_room(self, geometry):
        """A trajectory leaving the room is rejected before rendering."""
        outside = SourceTrajectory.static((9.0, 1.0, 1.0))
        with pytest.raises(ConfigError):
            render_scene([(np.zeros(10), outside)], FREE_FIELD, geometry)

    def test_short_trajectory(self, geometry):
        """A moving trajectory has to span the whole signal."""
        path = SourceTrajectory(
            ((0.0, geometry.point_at(40, 1)), (0.001, geometry.point_at(50, 1)))
        )
        with pytest.raises(ConfigError):
            render_scene([(np.zeros(441), path)], FREE_FIELD, geometry)


class TestMixing:
    def test_mix_reaches_requested_snr(self, rng):
        """The residual is scaled to the requested SNR on the reference channel."""
        target = MultichannelAudio(rng.standard_normal((2, 4000)), CAPTURE_RATE)
        other = MultichannelAudio(3 * rng.standard_normal((2, 4000)), CAPTURE_RATE)
        result = mix_at_snr(target, [other], None, -3.0)
        assert measured_snr_db(target, result.residual) == pytest.approx(-3.0)
        np.testing.assert_allclose(
            result.mixture.samples, target.samples + result.residual.samples
        )

    def test_silent_target(self):
        """The SNR of a silent target is undefined."""
        silent = MultichannelAudio(np.zeros((2, 100)), CAPTURE_RATE)
        noise = white_noise(2, 100, CAPTURE_RATE, seed=0)
        with pytest.raises(UndefinedSNRError):
            mix_at_snr(silent, [], noise, 0.0)

    def test_silent_interference(self, rng):
        """Nothing to scale means the SNR cannot be met."""
        target = MultichannelAudio(rng.standard_normal((2, 100)), CAPTURE_RATE)
        with pytest.raises(UndefinedSNRError):
            mix_at_snr(target, [], None, 0.0)

    def test_shape_mismatch(self, rng):
        """Interferers must match the target's shape."""
        target = MultichannelAudio(rng.standard_normal((2, 100)), CAPTURE_RATE)
        other = MultichannelAudio(rng.standard_normal((2, 90)), CAPTURE_RATE)
        with pytest.raises(ShapeError):
            mix_at_snr(target, [other], None, 0.0)


class TestSyntheticSpeech:
    def test_rms_and_determinism(self):
        """Clips are normalized to 0.1 RMS and reproducible by seed."""
        a = synthetic_speech(0.5, SPEECH_RATE, seed=4)
        b = synthetic_speech(0.5, SPEECH_RATE, seed=4)
        assert len(a) == 8000
        assert np.sqrt(np.mean(a**2)) == pytest.approx(0.1)
        np.testing.assert_array_equal(a, b)

    def test_voices_differ(self):
        """Different talker ids give different pitch and formants."""
        assert TalkerVoice.from_id(0) != TalkerVoice.from_id(1)
        assert TalkerVoice.from_id(5) == TalkerVoice.from_id(5)
        assert 90.0 <= TalkerVoice.from_id(2).f0 <= 230.0


class TestFmcwScene:
    def test_echo_band(self, geometry):
        """Echo energy sits in the 18-20 kHz chirp band."""
        chirp = ChirpConfig()
        path = SourceTrajectory.static(geometry.point_at(80, 0.6))
        echoes = simulate_fmcw_scene(chirp, path, geometry, duration_s=0.2)
        assert echoes.samples.shape == (4, 8820)
        spectrum = np.abs(np.fft.rfft(echoes.samples[0])) ** 2
        freqs = np.fft.rfftfreq(8820, 1 / CAPTURE_RATE)
        band = (freqs > 17500) & (freqs < 20500)
        assert spectrum[band].sum() > 0.9 * spectrum.sum()

    def test_zero_gain(self, geometry):
        """A reflector with zero gain produces silence."""
        path = SourceTrajectory.static(geometry.point_at(80, 0.6))
        echoes = simulate_fmcw_scene(
            ChirpConfig(), path, geometry, duration_s=0.05, reflector_gain=0.0
        )
        assert not np.any(echoes.samples)


class TestSceneFiles:
    SCENE = {
        "duration_s": 0.3,
        "snr_db": 3.0,
        "seed": 5,
        "room": {
            "dimensions": [5.0, 4.0, 3.0],
            "reflection_coefficient": 0.3,
            "max_image_order": 1,
        },
        "sources": [
            {"azimuth_deg": 70.0, "distance_m": 1.0},
            {"azimuth_deg": 130.0, "distance_m": 1.5, "talker": 4},
        ],
        "fmcw": {"enabled": True, "reflector_gain": 0.05},
    }

    def test_parse(self, geometry):
        """Static sources are placed relative to the array."""
        spec = parse_scene_spec(self.SCENE, geometry)
        assert spec.duration_s == 0.3
        assert spec.room.max_image_order == 1
        assert spec.sources[1].talker == 4
        start = spec.sources[0].trajectory.points[0]
        assert geometry.azimuth_of(start) == pytest.approx(70.0)

    def test_missing_room_key(self, geometry):
        """Missing room keys are named in the error."""
        scene = dict(self.SCENE, room={"dimensions": [5.0, 4.0, 3.0]})
        with pytest.raises(ConfigError, match="room.reflection_coefficient"):
            parse_scene_spec(scene, geometry)

    def test_render_and_truth_csv(self, geometry, tmp_path):
        """A rendered scene meets its SNR and its truth survives CSV export."""
        spec = parse_scene_spec(self.SCENE, geometry)
        scene = render_scene_spec(spec, geometry, ChirpConfig())
        assert scene.mixture.samples.shape == (4, 13230)
        assert scene.fmcw is not None
        assert measured_snr_db(scene.truth.target, scene.truth.residual) == (
            pytest.approx(3.0)
        )
        path = tmp_path / "truth.csv"
        write_truth_csv(scene.truth, path)
        times, azimuths, distances = read_truth_csv(path)
        np.testing.assert_allclose(times, scene.truth.times, atol=1e-6)
        np.testing.assert_allclose(azimuths, 70.0, atol=1e-4)
        np.testing.assert_allclose(distances, 1.0, atol=1e-4)

    def test_truth_csv_columns(self, tmp_path):
        """A CSV without the truth columns is rejected."""
        path = tmp_path / "bad.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(ConfigError):
            read_truth_csv(path)
