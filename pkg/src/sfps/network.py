"""Layered feed-forward network with explicit per-layer backward steps.

Layers are numbered 1..L from the bottom; the top layer is always a softmax
loss. Backward runs strictly top-down, one layer per call, so callers can
launch communication for layer ``i`` while layers below ``i`` still compute.

Activations travel between layers as ``(K, features)`` matrices. Conv and
pool layers reshape internally to ``(K, C, H, W)``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ProtocolError, ShapeError


class LayerKind(str, enum.Enum):
    FULLY_CONNECTED = "fc"
    RELU = "relu"
    CONV2D = "conv"
    MAXPOOL = "maxpool"
    SOFTMAX_LOSS = "softmax_loss"

    @property
    def parameterized(self) -> bool:
        return self in (LayerKind.FULLY_CONNECTED, LayerKind.CONV2D)


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    units: int = 0  # fc output size
    channels: int = 0  # conv output channels
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    size: int = 2  # maxpool window (stride == size)
    bias: bool = True

    @classmethod
    def fc(cls, units: int, bias: bool = True) -> "LayerSpec":
        return cls(LayerKind.FULLY_CONNECTED, units=units, bias=bias)

    @classmethod
    def conv(cls, channels: int, kernel: int, stride: int = 1, pad: int = 0, bias: bool = True) -> "LayerSpec":
        return cls(LayerKind.CONV2D, channels=channels, kernel=kernel, stride=stride, pad=pad, bias=bias)

    @classmethod
    def relu(cls) -> "LayerSpec":
        return cls(LayerKind.RELU)

    @classmethod
    def maxpool(cls, size: int = 2) -> "LayerSpec":
        return cls(LayerKind.MAXPOOL, size=size)

    @classmethod
    def softmax_loss(cls) -> "LayerSpec":
        return cls(LayerKind.SOFTMAX_LOSS)


@dataclass(frozen=True)
class LayerProfile:
    """Static per-layer metadata used by the protocol selector and cost model.

    ``M`` and ``N`` are the output and input sides of the communicated weight
    matrix. For conv layers that is ``channels x (in_channels*k*k)``.
    """

    layer_id: int
    kind: LayerKind
    M: int
    N: int
    param_count: int
    flop_estimate: int
    bias: bool
    in_shape: tuple
    out_shape: tuple


def _prod(shape) -> int:
    return int(math.prod(shape))


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple
    num_classes: int
    layers: tuple
    profiles: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "profiles", tuple(self._infer_profiles()))

    def _infer_profiles(self):
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if not self.layers or self.layers[-1].kind is not LayerKind.SOFTMAX_LOSS:
            raise ConfigError("topmost layer must be a softmax loss")
        if any(l.kind is LayerKind.SOFTMAX_LOSS for l in self.layers[:-1]):
            raise ConfigError("softmax loss may only appear on top")
        if not self.input_shape or any(d <= 0 for d in self.input_shape):
            raise ConfigError(f"bad input shape {self.input_shape}")
        shape = self.input_shape
        for i, spec in enumerate(self.layers, start=1):
            n_in = _prod(shape)
            if spec.kind is LayerKind.FULLY_CONNECTED:
                if spec.units <= 0:
                    raise ConfigError(f"layer {i}: fc needs units > 0")
                M, N = spec.units, n_in
                out = (M,)
                params = M * N + (M if spec.bias else 0)
                flops = 2 * M * N
            elif spec.kind is LayerKind.CONV2D:
                if len(shape) != 3:
                    raise ConfigError(f"layer {i}: conv needs a (C, H, W) input, got {shape}")
                if spec.channels <= 0 or spec.kernel <= 0 or spec.stride <= 0 or spec.pad < 0:
                    raise ConfigError(f"layer {i}: bad conv hyperparameters")
                c, h, w = shape
                oh = (h + 2 * spec.pad - spec.kernel) // spec.stride + 1
                ow = (w + 2 * spec.pad - spec.kernel) // spec.stride + 1
                if oh <= 0 or ow <= 0:
                    raise ConfigError(f"layer {i}: conv kernel larger than input")
                M, N = spec.channels, c * spec.kernel * spec.kernel
                out = (spec.channels, oh, ow)
                params = M * N + (M if spec.bias else 0)
                flops = 2 * M * N * oh * ow
            elif spec.kind is LayerKind.MAXPOOL:
                if len(shape) != 3:
                    raise ConfigError(f"layer {i}: maxpool needs a (C, H, W) input")
                c, h, w = shape
                if spec.size <= 0 or h < spec.size or w < spec.size:
                    raise ConfigError(f"layer {i}: bad pool size")
                out = (c, h // spec.size, w // spec.size)
                M, N, params, flops = _prod(out), n_in, 0, n_in
            elif spec.kind is LayerKind.RELU:
                out = shape
                M, N, params, flops = n_in, n_in, 0, n_in
            else:
                if n_in != self.num_classes:
                    raise ConfigError(
                        f"softmax loss expects {self.num_classes} inputs, layer below gives {n_in}"
                    )
                out = ()
                M, N, params, flops = 1, n_in, 0, 3 * n_in
            yield LayerProfile(i, spec.kind, M, N, params, flops, spec.bias and spec.kind.parameterized, shape, out)
            shape = out

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def input_dim(self) -> int:
        return _prod(self.input_shape)

    def param_layers(self) -> list[int]:
        return [p.layer_id for p in self.profiles if p.kind.parameterized]

    def profile(self, layer_id: int) -> LayerProfile:
        return self.profiles[layer_id - 1]

    def fingerprint(self) -> str:
        parts = [f"in={self.input_shape}", f"classes={self.num_classes}"]
        parts += [repr(l) for l in self.layers]
        return ";".join(parts)


@dataclass
class LayerParams:
    weight: np.ndarray
    bias: np.ndarray | None = None

    def copy(self) -> "LayerParams":
        return LayerParams(self.weight.copy(), None if self.bias is None else self.bias.copy())

    def arrays(self) -> list[np.ndarray]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]


class ModelState(dict):
    """Mapping ``layer_id -> LayerParams`` for the parameterized layers."""

    def copy(self) -> "ModelState":
        return ModelState({k: v.copy() for k, v in self.items()})

    def to_bytes(self) -> bytes:
        return b"".join(a.tobytes() for k in sorted(self) for a in self[k].arrays())

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for k in sorted(self) for a in self[k].arrays()])


def init_params(spec: ModelSpec, seed: int, dtype=np.float32) -> ModelState:
    if not isinstance(spec, ModelSpec):
        raise ConfigError("init_params needs a ModelSpec")
    rng = np.random.default_rng(seed)
    state = ModelState()
    for prof in spec.profiles:
        if not prof.kind.parameterized:
            continue
        r = math.sqrt(6.0 / (prof.M + prof.N))
        w = rng.uniform(-r, r, size=(prof.M, prof.N)).astype(dtype)
        b = np.zeros(prof.M, dtype=dtype) if prof.bias else None
        state[prof.layer_id] = LayerParams(w, b)
    return state


@dataclass
class ForwardTrace:
    """Per-layer inputs and caches from one forward pass.

    ``errors`` is the backward cursor: ``errors[i]`` is the error message layer
    ``i`` emitted downward. It is filled top-down by :func:`backward_layer`.
    """

    inputs: tuple  # inputs[i - 1] is the (K, N) input to layer i
    caches: tuple
    loss: float
    labels: np.ndarray
    errors: dict = field(default_factory=dict)

    @property
    def batch_size(self) -> int:
        return self.inputs[0].shape[0]


@dataclass(frozen=True)
class BackwardRecord:
    layer_id: int
    kind: LayerKind
    weight_grad: np.ndarray | None
    bias_grad: np.ndarray | None
    error_out: np.ndarray  # (K, M): error arriving from the layer above
    activation_in: np.ndarray  # (K, N): this layer's input
    error_in: np.ndarray | None  # (K, N): error passed to the layer below
    scale: float

    @property
    def batch_size(self) -> int:
        return self.activation_in.shape[0]


def _im2col(x4: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    if pad:
        x4 = np.pad(x4, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x4, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    kb, c, oh, ow = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(kb, c * k * k, oh * ow)


def _col2im(cols: np.ndarray, in_shape: tuple, k: int, stride: int, pad: int, oh: int, ow: int) -> np.ndarray:
    kb = cols.shape[0]
    c, h, w = in_shape
    out = np.zeros((kb, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols6 = cols.reshape(kb, c, k, k, oh, ow)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols6[:, :, i, j]
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return out


def _softmax_parts(z: np.ndarray):
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    s = e.sum(axis=1, keepdims=True)
    logp = z - zmax - np.log(s)
    return e / s, logp


def check_batch(spec: ModelSpec, x, labels) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x)
    labels = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(f"batch features must be (K, {spec.input_dim}), got {x.shape}")
    if labels.shape != (x.shape[0],):
        raise ShapeError("one label per sample required")
    if labels.size and (labels.min() < 0 or labels.max() >= spec.num_classes):
        raise ShapeError("label out of range")
    return x, labels


def forward_layer(spec: ModelSpec, state: ModelState, layer_id: int, a: np.ndarray, labels: np.ndarray):
    """Forward one layer; returns ``(output, cache, loss)``.

    ``output`` is None and ``loss`` a float only for the top (loss) layer.
    """
    prof = spec.profile(layer_id)
    lspec = spec.layers[layer_id - 1]
    kb = a.shape[0]
    kind = prof.kind
    if kind is LayerKind.FULLY_CONNECTED:
        p = state[layer_id]
        out = a @ p.weight.T
        if p.bias is not None:
            out = out + p.bias
        return out, None, None
    if kind is LayerKind.RELU:
        mask = a > 0
        return np.where(mask, a, 0).astype(a.dtype, copy=False), mask, None
    if kind is LayerKind.CONV2D:
        p = state[layer_id]
        cols = _im2col(a.reshape((kb,) + prof.in_shape), lspec.kernel, lspec.stride, lspec.pad)
        y = np.einsum("fn,knp->kfp", p.weight, cols)
        if p.bias is not None:
            y = y + p.bias[None, :, None]
        return y.reshape(kb, -1), cols, None
    if kind is LayerKind.MAXPOOL:
        c, h, w = prof.in_shape
        s = lspec.size
        _, oh, ow = prof.out_shape
        x4 = a.reshape(kb, c, h, w)[:, :, : oh * s, : ow * s]
        blocks = x4.reshape(kb, c, oh, s, ow, s).transpose(0, 1, 2, 4, 3, 5).reshape(kb, c, oh, ow, s * s)
        arg = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0].reshape(kb, -1)
        return out, arg, None
    probs, logp = _softmax_parts(a)
    loss = float(-np.mean(logp[np.arange(kb), labels]))
    return None, probs, loss


def forward(spec: ModelSpec, state: ModelState, x: np.ndarray, labels: np.ndarray) -> ForwardTrace:
    x, labels = check_batch(spec, x, labels)
    inputs, caches = [], []
    a = x
    loss = 0.0
    for layer_id in range(1, spec.num_layers + 1):
        inputs.append(a)
        a, cache, top_loss = forward_layer(spec, state, layer_id, a, labels)
        caches.append(cache)
        if top_loss is not None:
            loss = top_loss
    return ForwardTrace(tuple(inputs), tuple(caches), loss, labels)


def backward_layer(
    spec: ModelSpec,
    state: ModelState,
    trace: ForwardTrace,
    layer_id: int,
    grad_scale: float | None = None,
    emit_error: bool | None = None,
    weight_grad: bool = True,
) -> BackwardRecord:
    """Run the backward step of one layer.

    ``grad_scale`` multiplies the per-sample gradient sum (default ``1/K``,
    i.e. the mean). ``emit_error`` defaults to computing the error for the
    layer below only when there is one. ``weight_grad=False`` skips forming
    the fully-connected weight gradient when only its factors will be sent.
    """
    L = spec.num_layers
    if not 1 <= layer_id <= L:
        raise ProtocolError(f"no layer {layer_id}")
    if layer_id in trace.errors:
        raise ProtocolError(f"layer {layer_id} already ran backward on this trace")
    if layer_id != L and (layer_id + 1) not in trace.errors:
        raise ProtocolError(f"layer {layer_id} backward before layer {layer_id + 1} emitted its error")
    kb = trace.batch_size
    if grad_scale is None:
        grad_scale = 1.0 / kb
    if emit_error is None:
        emit_error = layer_id != 1
    prof = spec.profile(layer_id)
    lspec = spec.layers[layer_id - 1]
    a_in = trace.inputs[layer_id - 1]
    cache = trace.caches[layer_id - 1]
    dt = a_in.dtype.type
    scale = dt(grad_scale)
    wgrad = bgrad = None
    err_in = None

    if prof.kind is LayerKind.SOFTMAX_LOSS:
        onehot = np.zeros_like(cache)
        onehot[np.arange(kb), trace.labels] = 1
        err_out = np.zeros((kb, 1), dtype=a_in.dtype)
        err_in = cache - onehot
    else:
        err_out = trace.errors[layer_id + 1]
        if prof.kind is LayerKind.FULLY_CONNECTED:
            p = state[layer_id]
            if weight_grad:
                wgrad = scale * (err_out.T @ a_in)
            if p.bias is not None:
                bgrad = scale * err_out.sum(axis=0)
            if emit_error:
                err_in = err_out @ p.weight
        elif prof.kind is LayerKind.RELU:
            err_in = np.where(cache, err_out, 0).astype(err_out.dtype, copy=False)
        elif prof.kind is LayerKind.CONV2D:
            p = state[layer_id]
            _, oh, ow = prof.out_shape
            dy = err_out.reshape(kb, prof.M, oh * ow)
            wgrad = scale * np.einsum("kfp,knp->fn", dy, cache)
            if p.bias is not None:
                bgrad = scale * dy.sum(axis=(0, 2))
            if emit_error:
                dcols = np.einsum("fn,kfp->knp", p.weight, dy)
                err_in = _col2im(dcols, prof.in_shape, lspec.kernel, lspec.stride, lspec.pad, oh, ow).reshape(kb, -1)
        else:  # maxpool
            c, h, w = prof.in_shape
            s = lspec.size
            _, oh, ow = prof.out_shape
            g = np.zeros((kb, c, oh, ow, s * s), dtype=err_out.dtype)
            np.put_along_axis(g, cache[..., None], err_out.reshape(kb, c, oh, ow, 1), axis=-1)
            g = g.reshape(kb, c, oh, ow, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(kb, c, oh * s, ow * s)
            full = np.zeros((kb, c, h, w), dtype=err_out.dtype)
            full[:, :, : oh * s, : ow * s] = g
            err_in = full.reshape(kb, -1)
    # a None entry still marks the layer as done
    trace.errors[layer_id] = err_in
    return BackwardRecord(layer_id, prof.kind, wgrad, bgrad, err_out, a_in, err_in, float(grad_scale))


def backward_steps(spec: ModelSpec, state: ModelState, trace: ForwardTrace, grad_scale: float | None = None):
    """Yield one :class:`BackwardRecord` per layer, top layer first."""
    for layer_id in range(spec.num_layers, 0, -1):
        yield backward_layer(spec, state, trace, layer_id, grad_scale)


def gradients(spec: ModelSpec, state: ModelState, x, labels, grad_scale: float | None = None):
    """Full forward + backward; returns ``(loss, {layer_id: LayerParams-of-gradients})``."""
    trace = forward(spec, state, x, labels)
    grads = {}
    for rec in backward_steps(spec, state, trace, grad_scale):
        if rec.weight_grad is not None:
            grads[rec.layer_id] = LayerParams(rec.weight_grad, rec.bias_grad)
    return trace.loss, grads
