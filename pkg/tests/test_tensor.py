import struct

import numpy as np
import pytest

import SST.tensor as T
from SST.errors import (
    CheckpointVersionError,
    ConfigError,
    DataError,
    ShapeError,
    TapeError,
)

TOLERANCE = 1e-6


def param(rng, *shape, positive=False):
    data = rng.uniform(0.5, 1.5, shape) if positive else rng.standard_normal(shape)
    return T.Tensor(data, requires_grad=True)


class TestTape:
    def test_backward_accumulates(self):
        """A tensor used twice receives the sum of both gradients."""
        x = T.Tensor(np.array([3.0]), requires_grad=True)
        with T.Tape() as tape:
            y = T.sum_(T.add(T.mul(x, x), x))
        tape.backward(y)
        np.testing.assert_allclose(x.grad, [7.0])

    def test_grads_add_across_tapes(self):
        """Gradients accumulate until zero_grad."""
        x = T.Tensor(np.array([1.0, 2.0]), requires_grad=True)
        for _ in range(2):
            with T.Tape() as tape:
                y = T.sum_(T.scale(x, 3.0))
            tape.backward(y)
        np.testing.assert_allclose(x.grad, [6.0, 6.0])
        x.zero_grad()
        assert x.grad is None

    def test_single_use(self):
        """A tape runs backward once and cannot be reopened."""
        x = T.Tensor(np.ones(2), requires_grad=True)
        with T.Tape() as tape:
            y = T.sum_(x)
        tape.backward(y)
        with pytest.raises(TapeError):
            tape.backward(y)
        with pytest.raises(TapeError):
            with tape:
                pass

    def test_scalar_loss(self):
        """Only scalars can seed backward."""
        x = T.Tensor(np.ones(3), requires_grad=True)
        with T.Tape() as tape:
            y = T.scale(x, 2.0)
        with pytest.raises(ShapeError):
            tape.backward(y)

    def test_nothing_recorded_without_tape(self):
        """Operations outside a tape leave no record."""
        x = T.Tensor(np.ones(3), requires_grad=True)
        y = T.sum_(T.scale(x, 2.0))
        tape = T.Tape()
        tape.backward(y)
        assert x.grad is None

    def test_constants_get_no_grad(self):
        """Tensors without requires_grad are skipped."""
        x = T.Tensor(np.ones(2), requires_grad=True)
        c = T.Tensor(np.full(2, 5.0))
        with T.Tape() as tape:
            y = T.sum_(T.mul(x, c))
        tape.backward(y)
        assert c.grad is None
        np.testing.assert_allclose(x.grad, [5.0, 5.0])


class TestShapes:
    def test_no_implicit_broadcast(self):
        """Elementwise operators need identical shapes."""
        with pytest.raises(ShapeError):
            T.add(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones(3)))

    def test_explicit_broadcast(self):
        """broadcast_to expands and sums gradients back."""
        b = T.Tensor(np.ones((1, 3)), requires_grad=True)
        with T.Tape() as tape:
            y = T.sum_(T.broadcast_to(b, (4, 2, 3)))
        tape.backward(y)
        np.testing.assert_allclose(b.grad, np.full((1, 3), 8.0))

    def test_matmul_shapes(self):
        """Inner dimensions must agree."""
        with pytest.raises(ShapeError):
            T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((4, 5))))

    def test_conv_output_too_small(self):
        """A kernel wider than the padded input is a shape error."""
        with pytest.raises(ShapeError):
            T.conv1d(T.Tensor(np.ones((1, 2))), T.Tensor(np.ones((1, 1, 5))))


class TestForward:
    def test_conv1d_causal_padding(self):
        """Left padding keeps the output causal and length preserving."""
        x = T.Tensor(np.arange(1.0, 6.0)[None])
        w = T.Tensor(np.array([[[1.0, 1.0]]]))
        y = T.conv1d(x, w, dilation=2, padding=(2, 0))
        np.testing.assert_allclose(y.data, [[1.0, 2.0, 4.0, 6.0, 8.0]])

    def test_overlap_add(self):
        """Frames are summed at multiples of the hop."""
        frames = T.Tensor(np.ones((3, 4)))
        np.testing.assert_allclose(
            T.overlap_add(frames, 2).data, [1, 1, 2, 2, 2, 2, 1, 1]
        )

    def test_softmax_sums_to_one(self, rng):
        """Softmax rows sum to one."""
        y = T.softmax(T.Tensor(rng.standard_normal((3, 5))))
        np.testing.assert_allclose(y.data.sum(axis=-1), 1.0)

    def test_layer_norm_statistics(self, rng):
        """Unit gain and zero offset give zero mean and unit variance per position."""
        x = T.Tensor(rng.standard_normal((8, 5)) * 3 + 2)
        y = T.layer_norm(x, T.Tensor(np.ones(8)), T.Tensor(np.zeros(8)))
        np.testing.assert_allclose(y.data.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.data.std(axis=0), 1.0, atol=1e-4)


class TestGradients:
    def test_elementwise_chain(self, rng):
        """exp, log, div, sqrt, cos and sin."""
        a, b = param(rng, 4, positive=True), param(rng, 4, positive=True)

        def fn(a, b):
            mixed = T.div(T.log(T.add(T.exp(a), b)), T.sqrt(b))
            return T.sum_(T.mul(T.cos(mixed), T.sin(a)))

        assert T.grad_check(fn, [a, b]) < TOLERANCE

    def test_activations(self, rng):
        """sigmoid, tanh, softmax and per-channel PReLU."""
        x, alpha = param(rng, 3, 4), param(rng, 3)

        def fn(x, alpha):
            y = T.prelu(T.tanh(x), alpha)
            return T.sum_(T.mul(T.softmax(y), T.sigmoid(x)))

        assert T.grad_check(fn, [x, alpha]) < TOLERANCE

    def test_dense_and_norm(self, rng):
        """dense, layer_norm and channel_affine."""
        x, w, b = param(rng, 5, 3), param(rng, 3, 4), param(rng, 4)
        g, o = param(rng, 4), param(rng, 4)

        def fn(x, w, b, g, o):
            h = T.transpose(T.dense(x, w, b), (1, 0))
            return T.sum_(T.mul(T.layer_norm(h, g, o), T.channel_affine(h, g, o)))

        assert T.grad_check(fn, [x, w, b, g, o]) < TOLERANCE

    def test_conv1d(self, rng):
        """Dilated, grouped 1-D convolution with look-ahead padding."""
        x, w, b = param(rng, 4, 9), param(rng, 4, 2, 3), param(rng, 4)

        def fn(x, w, b):
            y = T.conv1d(x, w, b, dilation=2, padding=(2, 2), groups=2)
            return T.sum_(T.mul(y, y))

        assert T.grad_check(fn, [x, w, b]) < TOLERANCE

    def test_conv2d_strided(self, rng):
        """Strided 2-D convolution with asymmetric padding."""
        x, w, b = param(rng, 2, 7, 6), param(rng, 3, 2, 3, 2), param(rng, 3)

        def fn(x, w, b):
            y = T.conv2d(x, w, b, stride=(2, 1), padding=((1, 1), (0, 1)))
            return T.sum_(T.mul(y, y))

        assert T.grad_check(fn, [x, w, b]) < TOLERANCE

    def test_conv3d(self, rng):
        """3-D convolution over a short stack of profiles."""
        x, w = param(rng, 1, 3, 5, 5), param(rng, 2, 1, 2, 3, 3)

        def fn(x, w):
            y = T.conv3d(x, w, stride=(1, 2, 2), padding=((1, 0), (1, 1), (1, 1)))
            return T.sum_(T.mul(y, y))

        assert T.grad_check(fn, [x, w]) < TOLERANCE

    def test_lstm_cell(self, rng):
        """Two unrolled LSTM steps."""
        x = param(rng, 2, 3)
        h, c = T.Tensor(np.zeros(4)), T.Tensor(np.zeros(4))
        wi, wh, b = param(rng, 3, 16), param(rng, 4, 16), param(rng, 16)

        def fn(x, wi, wh, b):
            hidden, cell = h, c
            for t in range(2):
                hidden, cell = T.lstm_cell(x[t], hidden, cell, wi, wh, b)
            return T.sum_(T.mul(hidden, hidden))

        assert T.grad_check(fn, [x, wi, wh, b]) < TOLERANCE

    def test_shape_operations(self, rng):
        """concat, reshape, slicing (basic and advanced) and overlap-add."""
        a, b = param(rng, 2, 3), param(rng, 2, 2)

        def fn(a, b):
            joined = T.reshape(T.concat([a, b], axis=1), (5, 2))
            picked = T.slice_(joined, (np.array([0, 0, 3]), slice(None)))
            framed = T.overlap_add(joined[1:4], 1)
            return T.add(T.sum_(T.mul(picked, picked)), T.mean(T.abs_(framed)))

        assert T.grad_check(fn, [a, b]) < TOLERANCE

    def test_needs_float64(self, rng):
        """Gradient checks refuse 32-bit inputs."""
        with T.precision("float32"):
            x = T.Tensor([1.0, 1.0], requires_grad=True)
        with pytest.raises(ConfigError):
            T.grad_check(lambda x: T.sum_(x), [x])


class TestPrecision:
    def test_context(self):
        """New tensors follow the active precision."""
        assert T.current_precision() is np.float64
        with T.precision("float32"):
            assert T.Tensor([1.0, 2.0]).data.dtype == np.float32
        assert T.Tensor([1.0]).data.dtype == np.float64

    def test_unsupported(self):
        """Half precision is not supported."""
        with pytest.raises(ConfigError):
            with T.precision("float16"):
                pass


class TestAdam:
    def test_first_step(self):
        """The first bias-corrected step moves each entry by about lr."""
        params = {"w": np.array([1.0, -2.0, 0.5])}
        grads = {"w": np.array([0.3, -4.0, 1e-3])}
        new, state = T.adam_step(params, grads, None, lr=0.01)
        np.testing.assert_allclose(new["w"], [0.99, -1.99, 0.49], atol=1e-4)
        np.testing.assert_array_equal(params["w"], [1.0, -2.0, 0.5])
        assert state.step == 1

    def test_names_must_match(self):
        """Parameters and gradients must name the same tensors."""
        with pytest.raises(ConfigError):
            T.adam_step({"a": np.ones(1)}, {"b": np.ones(1)}, None, lr=0.1)

    def test_converges_on_quadratic(self):
        """Adam drives a quadratic towards its minimum."""
        params = {"x": np.array([5.0])}
        state = None
        for _ in range(500):
            params, state = T.adam_step(params, {"x": 2 * params["x"]}, state, lr=0.05)
        assert abs(params["x"][0]) < 0.25


class TestCheckpoint:
    def test_save_and_load(self, tmp_path, rng):
        """Tensors come back as float32 with the manifest beside them."""
        path = tmp_path / "model.sstw"
        tensors = {"a.w": rng.standard_normal((2, 3)), "b": np.arange(4.0)}
        T.save_checkpoint(path, tensors, {"version": 1, "note": "test"})
        loaded, manifest = T.load_checkpoint(path)
        assert list(loaded) == ["a.w", "b"]
        np.testing.assert_array_equal(loaded["a.w"], tensors["a.w"].astype(np.float32))
        assert manifest == {"version": 1, "note": "test"}
        assert T.manifest_path(path).name == "model.sstw.json"

    def test_bad_magic(self, tmp_path):
        """Foreign files are a data error."""
        path = tmp_path / "x.sstw"
        path.write_bytes(struct.pack("<4sHI", b"ABCD", 1, 0))
        with pytest.raises(DataError):
            T.load_checkpoint(path)

    def test_version(self, tmp_path):
        """Newer checkpoint layouts are a version error."""
        path = tmp_path / "x.sstw"
        path.write_bytes(struct.pack("<4sHI", b"SSTW", 9, 0))
        with pytest.raises(CheckpointVersionError):
            T.load_checkpoint(path)

    def test_truncated(self, tmp_path):
        """A tensor cut short is a data error."""
        path = tmp_path / "x.sstw"
        T.save_checkpoint(path, {"w": np.ones((4, 4))}, {})
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(DataError):
            T.load_checkpoint(path)
