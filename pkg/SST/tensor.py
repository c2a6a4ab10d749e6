"""
Dense tensors with reverse-mode differentiation.

Only the operators the spatial networks need are provided, and shapes
are explicit: no operator broadcasts implicitly (`broadcast_to` exists
for the cases that need it). Every operator records itself on the active
`Tape`; `Tape.backward` walks the record in exact reverse order and
accumulates gradients into the `grad` buffers of tensors that require
them. Without an active tape nothing is recorded.

    with Tape() as tape:
        loss = mean(mul(x, x))
    tape.backward(loss)

Precision follows the `precision` context: float64 for gradient checks,
float32 for training runs.
"""

import itertools
import json
import logging
import struct
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterator, Mapping, Sequence

import numpy as np

from SST.errors import (
    CheckpointVersionError,
    ConfigError,
    DataError,
    ShapeError,
    TapeError,
)

logger = logging.getLogger(__name__)

_precision: ContextVar[type] = ContextVar("precision", default=np.float64)
_active_tape: ContextVar["Tape | None"] = ContextVar("active_tape", default=None)

Backward = Callable[[np.ndarray], Sequence[np.ndarray | None]]


@contextmanager
def precision(dtype: str | type) -> Iterator[type]:
    """Set the dtype of newly created tensors ("float32" or "float64")."""
    match np.dtype(dtype).name:
        case "float32":
            chosen: type = np.float32
        case "float64":
            chosen = np.float64
        case other:
            raise ConfigError(f"unsupported precision '{other}'")
    token = _precision.set(chosen)
    try:
        yield chosen
    finally:
        _precision.reset(token)


def current_precision() -> type:
    return _precision.get()


class Tensor:
    """An n-dimensional array, optionally tracked for gradients."""

    def __init__(self, data: Any, requires_grad: bool = False, name: str = ""):
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=current_precision())
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __truediv__(self, other: "Tensor") -> "Tensor":
        return div(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __getitem__(self, index: Any) -> "Tensor":
        return slice_(self, index)


@dataclass
class _Record:
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: Backward


class Tape:
    """
    Ordered record of the operations run while the tape is active.

    A tape supports exactly one `backward` call; a second call raises
    `TapeError`.
    """

    def __init__(self) -> None:
        self.records: list[_Record] = []
        self._used = False
        self._token: Any = None

    def __enter__(self) -> "Tape":
        if self._used:
            raise TapeError("a tape cannot be reopened after backward")
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc: Any) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def backward(self, loss: Tensor) -> None:
        if self._used:
            raise TapeError("backward was already run on this tape")
        if loss.data.size != 1:
            raise ShapeError("backward", loss.shape, ())
        self._used = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        seen: dict[int, Tensor] = {id(loss): loss}
        for record in reversed(self.records):
            upstream = grads.pop(id(record.output), None)
            if upstream is None:
                continue
            contributions = record.backward(upstream)
            for tensor, g in zip(record.inputs, contributions):
                if g is None or not tensor.requires_grad:
                    continue
                if g.shape != tensor.shape:
                    raise ShapeError("backward", tensor.shape, g.shape)
                key = id(tensor)
                seen[key] = tensor
                grads[key] = grads[key] + g if key in grads else g

        for key, g in grads.items():
            tensor = seen[key]
            g = g.astype(tensor.data.dtype, copy=False)
            tensor.grad = g if tensor.grad is None else tensor.grad + g
        self.records.clear()


def _wrap(data: np.ndarray, inputs: Sequence[Tensor], backward: Backward) -> Tensor:
    track = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    tape = _active_tape.get()
    if track and tape is not None:
        tape.records.append(_Record(out, tuple(inputs), backward))
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


# --------------------------------------------------------------------------
# Elementwise arithmetic
# --------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _wrap(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _wrap(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _wrap(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    out = a.data / b.data
    return _wrap(out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def scale(a: Tensor, factor: float) -> Tensor:
    return _wrap(a.data * factor, (a,), lambda g: (g * factor,))


def shift(a: Tensor, offset: float) -> Tensor:
    return _wrap(a.data + offset, (a,), lambda g: (g,))


def abs_(a: Tensor) -> Tensor:
    return _wrap(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _wrap(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _wrap(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _wrap(out, (a,), lambda g: (g * 0.5 / out,))


def cos(a: Tensor) -> Tensor:
    return _wrap(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def sin(a: Tensor) -> Tensor:
    return _wrap(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def clamp(a: Tensor, low: float, high: float) -> Tensor:
    inside = (a.data > low) & (a.data < high)
    return _wrap(np.clip(a.data, low, high), (a,), lambda g: (g * inside,))


# --------------------------------------------------------------------------
# Activations
# --------------------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    active = a.data > 0
    return _wrap(a.data * active, (a,), lambda g: (g * active,))


def prelu(a: Tensor, alpha: Tensor) -> Tensor:
    """Per-channel PReLU; `alpha` has one entry per leading-axis channel."""
    if alpha.shape not in ((a.shape[0],), (1,)):
        raise ShapeError("prelu", a.shape, alpha.shape)
    slope = alpha.data.reshape((-1,) + (1,) * (a.ndim - 1))
    negative = a.data < 0
    out = np.where(negative, slope * a.data, a.data)

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ga = np.where(negative, g * slope, g)
        per_channel = (g * a.data * negative).reshape(a.shape[0], -1).sum(axis=1)
        galpha = per_channel if alpha.shape[0] > 1 else per_channel.sum(keepdims=True)
        return ga, galpha

    return _wrap(out, (a, alpha), backward)


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _wrap(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _wrap(out, (a,), lambda g: (g * (1.0 - out**2),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    out = shifted / shifted.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _wrap(out, (a,), backward)


# --------------------------------------------------------------------------
# Reductions and shape operations
# --------------------------------------------------------------------------


def sum_(a: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    out = np.sum(a.data, axis=axis)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        expanded = g if axis is None else np.expand_dims(g, axis)
        return (np.broadcast_to(expanded, a.shape).copy(),)

    return _wrap(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    total = sum_(a, axis)
    count = a.data.size // max(total.data.size, 1)
    return scale(total, 1.0 / count)


def l1(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference."""
    return mean(abs_(sub(a, b)))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)
    return _wrap(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))
    return _wrap(np.transpose(a.data, axes), (a,), lambda g: (g.transpose(inverse),))


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Explicit broadcast; gradients are summed back over repeated axes."""
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as err:
        raise ShapeError("broadcast_to", a.shape, shape) from err
    lead = len(shape) - a.ndim

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        reduced = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(
            i for i, n in enumerate(a.shape) if n == 1 and reduced.shape[i] != 1
        )
        return (reduced.sum(axis=axes, keepdims=True) if axes else reduced,)

    return _wrap(out, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    shapes = [t.shape for t in tensors]
    ndim = tensors[0].ndim
    axis = axis % ndim
    rest = {s[:axis] + s[axis + 1 :] for s in shapes}
    if len(rest) != 1 or any(len(s) != ndim for s in shapes):
        raise ShapeError("concat", *shapes)
    bounds = np.cumsum([0] + [s[axis] for s in shapes])
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g: np.ndarray) -> list[np.ndarray]:
        return [
            np.take(g, np.arange(lo, hi), axis=axis)
            for lo, hi in zip(bounds[:-1], bounds[1:])
        ]

    return _wrap(out, tensors, backward)


def slice_(a: Tensor, index: Any) -> Tensor:
    out = a.data[index]

    advanced = any(
        isinstance(i, (list, np.ndarray))
        for i in (index if isinstance(index, tuple) else (index,))
    )

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros_like(a.data)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return _wrap(np.array(out), (a,), backward)


# --------------------------------------------------------------------------
# Linear layers
# --------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a[..., k] @ b[k, m] -> [..., m]."""
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ga = g @ b.data.T
        gb = a.data.reshape(-1, b.shape[0]).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _wrap(out, (a, b), backward)


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    if bias is None:
        return out
    if bias.shape != (weight.shape[1],):
        raise ShapeError("dense", weight.shape, bias.shape)
    return add(out, broadcast_to(bias, out.shape))


def channel_affine(x: Tensor, gain: Tensor, offset: Tensor) -> Tensor:
    """y[c, ...] = gain[c] * x[c, ...] + offset[c]."""
    if gain.shape != (x.shape[0],) or offset.shape != (x.shape[0],):
        raise ShapeError("channel_affine", x.shape, gain.shape, offset.shape)
    shape = (-1,) + (1,) * (x.ndim - 1)
    gx, bx = gain.data.reshape(shape), offset.data.reshape(shape)
    axes = tuple(range(1, x.ndim))

    def backward(g: np.ndarray) -> tuple[np.ndarray, ...]:
        return g * gx, (g * x.data).sum(axis=axes), g.sum(axis=axes)

    return _wrap(x.data * gx + bx, (x, gain, offset), backward)


def layer_norm(
    x: Tensor, gain: Tensor, offset: Tensor, eps: float = 1e-5
) -> Tensor:
    """Normalize over the channel axis (axis 0) independently per position."""
    if gain.shape != (x.shape[0],) or offset.shape != (x.shape[0],):
        raise ShapeError("layer_norm", x.shape, gain.shape, offset.shape)
    shape = (-1,) + (1,) * (x.ndim - 1)
    mu = x.data.mean(axis=0, keepdims=True)
    centred = x.data - mu
    inv_std = 1.0 / np.sqrt((centred**2).mean(axis=0, keepdims=True) + eps)
    normed = centred * inv_std
    gx = gain.data.reshape(shape)
    axes = tuple(range(1, x.ndim))

    def backward(g: np.ndarray) -> tuple[np.ndarray, ...]:
        gn = g * gx
        ga = inv_std * (
            gn
            - gn.mean(axis=0, keepdims=True)
            - normed * (gn * normed).mean(axis=0, keepdims=True)
        )
        return ga, (g * normed).sum(axis=axes), g.sum(axis=axes)

    return _wrap(normed * gx + offset.data.reshape(shape), (x, gain, offset), backward)


# --------------------------------------------------------------------------
# Convolutions
# --------------------------------------------------------------------------


def _conv(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None,
    stride: tuple[int, ...],
    dilation: tuple[int, ...],
    padding: tuple[tuple[int, int], ...],
    groups: int,
    op: str,
) -> Tensor:
    """
    N-d cross-correlation over x[C_in, *spatial] with
    weight[C_out, C_in / groups, *kernel], evaluated one kernel tap at a
    time.
    """
    dims = len(stride)
    c_in, c_out = x.shape[0], weight.shape[0]
    if (
        x.ndim != dims + 1
        or weight.ndim != dims + 2
        or c_in % groups
        or c_out % groups
        or weight.shape[1] != c_in // groups
    ):
        raise ShapeError(op, x.shape, weight.shape)
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(op, weight.shape, bias.shape)

    kernel = weight.shape[2:]
    padded = np.pad(x.data, ((0, 0),) + tuple(padding))
    spatial = padded.shape[1:]
    out_size = tuple(
        (spatial[i] - dilation[i] * (kernel[i] - 1) - 1) // stride[i] + 1
        for i in range(dims)
    )
    if min(out_size) < 1:
        raise ShapeError(op, x.shape, weight.shape)

    xg = padded.reshape((groups, c_in // groups) + spatial)
    wg = weight.data.reshape((groups, c_out // groups, c_in // groups) + kernel)
    taps = list(itertools.product(*(range(k) for k in kernel)))

    span = tuple(stride[i] * (out_size[i] - 1) + 1 for i in range(dims))

    def window(tap: tuple[int, ...]) -> tuple[slice, ...]:
        starts = [tap[i] * dilation[i] for i in range(dims)]
        return (slice(None), slice(None)) + tuple(
            slice(starts[i], starts[i] + span[i], stride[i]) for i in range(dims)
        )

    out = np.zeros((groups, c_out // groups) + out_size, dtype=padded.dtype)
    for tap in taps:
        out += np.einsum("goc,gc...->go...", wg[(...,) + tap], xg[window(tap)])
    out = out.reshape((c_out,) + out_size)
    if bias is not None:
        out += bias.data.reshape((-1,) + (1,) * dims)

    def backward(g: np.ndarray) -> tuple[np.ndarray | None, ...]:
        gg = g.reshape((groups, c_out // groups) + out_size)
        gx = np.zeros_like(xg)
        gw = np.zeros_like(wg)
        for tap in taps:
            region = window(tap)
            gw[(...,) + tap] = np.einsum("go...,gc...->goc", gg, xg[region])
            gx[region] += np.einsum("goc,go...->gc...", wg[(...,) + tap], gg)
        gx = gx.reshape(padded.shape)
        unpad = (slice(None),) + tuple(
            slice(lo, spatial[i] - hi) for i, (lo, hi) in enumerate(padding)
        )
        grads: list[np.ndarray | None] = [gx[unpad], gw.reshape(weight.shape)]
        if bias is not None:
            grads.append(g.reshape(c_out, -1).sum(axis=1))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _wrap(out, inputs, backward)


def conv1d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    dilation: int = 1,
    padding: tuple[int, int] = (0, 0),
    groups: int = 1,
) -> Tensor:
    """
    Dilated 1-D convolution over x[C, T].

    A causal layer pads `dilation * (K - 1)` frames on the left only; a
    layer with look-ahead L moves L of those frames to the right.
    """
    return _conv(x, weight, bias, (1,), (dilation,), (padding,), groups, "conv1d")


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: tuple[int, int] = (1, 1),
    padding: tuple[tuple[int, int], tuple[int, int]] = ((0, 0), (0, 0)),
) -> Tensor:
    return _conv(x, weight, bias, stride, (1, 1), padding, 1, "conv2d")


def conv3d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: tuple[int, int, int] = (1, 1, 1),
    padding: tuple[tuple[int, int], ...] = ((0, 0), (0, 0), (0, 0)),
) -> Tensor:
    return _conv(x, weight, bias, stride, (1, 1, 1), padding, 1, "conv3d")


def overlap_add(frames: Tensor, hop: int) -> Tensor:
    """Sum frames[T, W] at multiples of `hop` into one signal."""
    count, width = frames.shape
    index = (np.arange(count) * hop)[:, None] + np.arange(width)[None, :]
    out = np.zeros((count - 1) * hop + width if count else 0, dtype=frames.data.dtype)
    np.add.at(out, index, frames.data)
    return _wrap(out, (frames,), lambda g: (g[index],))


# --------------------------------------------------------------------------
# Recurrent cell
# --------------------------------------------------------------------------


def lstm_cell(
    x: Tensor,
    h: Tensor,
    c: Tensor,
    w_input: Tensor,
    w_hidden: Tensor,
    bias: Tensor,
) -> tuple[Tensor, Tensor]:
    """
    One LSTM step; gates are packed (input, forget, cell, output) along
    the last axis of the weights.
    """
    hidden = h.shape[-1]
    if w_hidden.shape != (hidden, 4 * hidden) or w_input.shape[1] != 4 * hidden:
        raise ShapeError("lstm_cell", w_input.shape, w_hidden.shape, h.shape)
    gates = add(dense(x, w_input, bias), matmul(h, w_hidden))
    i = sigmoid(slice_(gates, np.s_[..., 0:hidden]))
    f = sigmoid(slice_(gates, np.s_[..., hidden : 2 * hidden]))
    g = tanh(slice_(gates, np.s_[..., 2 * hidden : 3 * hidden]))
    o = sigmoid(slice_(gates, np.s_[..., 3 * hidden :]))
    c_next = add(mul(f, c), mul(i, g))
    h_next = mul(o, tanh(c_next))
    return h_next, c_next


# --------------------------------------------------------------------------
# Gradient checking, optimizer, initialization
# --------------------------------------------------------------------------


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
    samples: int | None = None,
    seed: int = 0,
) -> float:
    """
    Largest relative error between analytic and central-difference
    gradients of the scalar `fn(*inputs)`.

    The error of each input is max|numeric - analytic| divided by the
    larger of the two max-norms. `samples` limits the number of
    perturbed entries per input (chosen with `seed`).
    """
    if any(t.data.dtype != np.float64 for t in inputs):
        raise ConfigError("grad_check needs 64-bit tensors")

    for t in inputs:
        t.data = np.array(t.data)  # contiguous and writable for perturbation
        t.grad = None
    with Tape() as tape:
        loss = fn(*inputs)
    tape.backward(loss)
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs
    ]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for tensor, exact in zip(inputs, analytic):
        flat = tensor.data.reshape(-1)
        count = flat.size
        picks = (
            np.arange(count)
            if samples is None or samples >= count
            else rng.choice(count, size=samples, replace=False)
        )
        numeric = np.zeros(len(picks))
        for n, i in enumerate(picks):
            original = flat[i]
            flat[i] = original + step
            upper = fn(*inputs).item()
            flat[i] = original - step
            lower = fn(*inputs).item()
            flat[i] = original
            numeric[n] = (upper - lower) / (2 * step)
        reference = exact.reshape(-1)[picks]
        norm = max(np.abs(numeric).max(initial=0), np.abs(reference).max(initial=0))
        if norm > 0:
            worst = max(worst, float(np.abs(numeric - reference).max() / norm))
    return worst


@dataclass(frozen=True)
class AdamState:
    step: int = 0
    m: Mapping[str, np.ndarray] = field(default_factory=dict)
    v: Mapping[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState | None,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; inputs are left untouched."""
    state = state or AdamState()
    if params.keys() != grads.keys():
        raise ConfigError("adam_step: parameter and gradient names differ")
    step = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"adam_step[{name}]", p.shape, g.shape)
        m = beta1 * state.m.get(name, np.zeros_like(p)) + (1 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(p)) + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**step)
        v_hat = v / (1 - beta2**step)
        new_params[name] = (p - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(step, new_m, new_v)


def uniform_init(
    rng: np.random.Generator, shape: tuple[int, ...], fan_in: int
) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(current_precision())


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"SSTW"
CHECKPOINT_VERSION = 1


def manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_checkpoint(
    path: str | Path, tensors: Mapping[str, np.ndarray], manifest: Mapping[str, Any]
) -> None:
    """
    Write named tensors and a JSON manifest next to them.

    Layout (little-endian): magic b"SSTW", uint16 version, uint32 count,
    then per tensor: uint16 name length, UTF-8 name, uint8 rank, uint32
    dims, float32 data in row-major order.
    """
    parts = [struct.pack("<4sHI", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(tensors))]
    for name, array in tensors.items():
        encoded = name.encode("utf-8")
        data = np.asarray(array, dtype="<f4")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack(f"<B{data.ndim}I", data.ndim, *data.shape))
        parts.append(data.tobytes(order="C"))
    Path(path).write_bytes(b"".join(parts))
    manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    logger.debug("wrote checkpoint %s (%d tensors)", path, len(tensors))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    path = Path(path)
    data = path.read_bytes()
    try:
        magic, version, count = struct.unpack_from("<4sHI", data, 0)
    except struct.error as err:
        raise DataError(f"{path}: truncated checkpoint header") from err
    if magic != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )

    offset = struct.calcsize("<4sHI")
    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (length,) = struct.unpack_from("<H", data, offset)
            offset += 2
            name = data[offset : offset + length].decode("utf-8")
            offset += length
            (rank,) = struct.unpack_from("<B", data, offset)
            shape = struct.unpack_from(f"<{rank}I", data, offset + 1)
            offset += 1 + 4 * rank
            size = int(np.prod(shape))
            if offset + 4 * size > len(data):
                raise DataError(f"{path}: truncated tensor '{name}'")
            array = np.frombuffer(data, dtype="<f4", count=size, offset=offset)
            tensors[name] = array.reshape(shape).astype(np.float32)
            offset += 4 * size
    except struct.error as err:
        raise DataError(f"{path}: truncated checkpoint") from err

    sidecar = manifest_path(path)
    manifest = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    return tensors, manifest
