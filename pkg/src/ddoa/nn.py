"""Minimal neural-network engine for the phase-map CNNs.

Arrays are plain numpy ndarrays. Feature maps are laid out as
``(batch, height, width, channels)``; for the DOA networks height is the
frequency axis and width the microphone axis. Convolutions are dilated
cross-correlations with stride 1 and no padding.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np

from .arch import ArchSpec, arch_from_text, arch_to_text

BCE_EPS = 1e-7
MODEL_MAGIC = b"DDOA"
MODEL_FORMAT_VERSION = 1


class DimensionError(ValueError):
    """Raised when array shapes do not agree with a layer."""


class ModelFormatError(ValueError):
    """Raised when a model file is truncated, corrupt or of unknown version."""


# --------------------------------------------------------------------------
# layers


@dataclass
class ConvLayer:
    weights: np.ndarray  # (filter_h, filter_w, in_channels, out_channels)
    bias: np.ndarray  # (out_channels,)
    dilation_h: int = 1
    dilation_w: int = 1

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise DimensionError(f"conv weights must be 4-D, got shape {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[3],):
            raise DimensionError(
                f"conv bias shape {self.bias.shape} does not match out_channels {self.weights.shape[3]}"
            )
        if self.dilation_h < 1 or self.dilation_w < 1:
            raise ValueError("dilation factors must be >= 1")

    @property
    def filter_h(self) -> int:
        return self.weights.shape[0]

    @property
    def filter_w(self) -> int:
        return self.weights.shape[1]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[2]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[3]

    def output_shape(self, height: int, width: int) -> tuple[int, int]:
        return (
            height - self.dilation_h * (self.filter_h - 1),
            width - self.dilation_w * (self.filter_w - 1),
        )


@dataclass
class DenseLayer:
    weights: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray  # (out_dim,)

    def __post_init__(self):
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise DimensionError(
                f"dense weights {self.weights.shape} and bias {self.bias.shape} disagree"
            )

    @property
    def in_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1]


def _as_batch(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise DimensionError(f"expected a {ndim - 1}-D or batched {ndim}-D array, got shape {x.shape}")
    return x, False


def _check_conv_input(x: np.ndarray, layer: ConvLayer) -> tuple[int, int]:
    _, height, width, channels = x.shape
    if channels != layer.in_channels:
        raise DimensionError(
            f"channel axis: input has {channels} channels, layer expects {layer.in_channels}"
        )
    out_h, out_w = layer.output_shape(height, width)
    if out_h < 1:
        raise DimensionError(
            f"height axis: input height {height} smaller than dilated filter extent "
            f"{1 + layer.dilation_h * (layer.filter_h - 1)}"
        )
    if out_w < 1:
        raise DimensionError(
            f"width axis: input width {width} smaller than dilated filter extent "
            f"{1 + layer.dilation_w * (layer.filter_w - 1)}"
        )
    return out_h, out_w


def conv2d_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """Dilated 2-D cross-correlation plus bias.

    ``out[n, i, j, o] = bias[o] + sum_{a, b, c} x[n, i + a*dh, j + b*dw, c] * w[a, b, c, o]``

    Accepts ``(H, W, C)`` or ``(N, H, W, C)`` input and returns the same rank.
    """
    xb, squeeze = _as_batch(x, 4)
    out_h, out_w = _check_conv_input(xb, layer)
    dh, dw = layer.dilation_h, layer.dilation_w
    out = np.empty((xb.shape[0], out_h, out_w, layer.out_channels), dtype=np.result_type(xb, layer.weights))
    out[...] = layer.bias
    for a in range(layer.filter_h):
        for b in range(layer.filter_w):
            patch = xb[:, a * dh : a * dh + out_h, b * dw : b * dw + out_w, :]
            out += patch @ layer.weights[a, b]
    return out[0] if squeeze else out


def conv2d_backward(
    x: np.ndarray, layer: ConvLayer, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of a scalar loss w.r.t. input, weights and bias of a conv layer.

    Parameters
    ----------
    x : ndarray
        The input that was passed to :func:`conv2d_forward`.
    layer : ConvLayer
    upstream : ndarray
        Gradient w.r.t. the forward output; must have the output's shape.

    Returns
    -------
    grad_input, grad_weights, grad_bias : ndarray
    """
    xb, squeeze = _as_batch(x, 4)
    gb, _ = _as_batch(upstream, 4)
    out_h, out_w = _check_conv_input(xb, layer)
    expected = (xb.shape[0], out_h, out_w, layer.out_channels)
    if gb.shape != expected:
        raise DimensionError(f"upstream gradient shape {gb.shape} != forward output shape {expected}")
    dh, dw = layer.dilation_h, layer.dilation_w
    grad_x = np.zeros_like(xb, dtype=np.result_type(xb, gb))
    grad_w = np.empty_like(layer.weights, dtype=np.result_type(layer.weights, gb))
    g2 = gb.reshape(-1, layer.out_channels)
    for a in range(layer.filter_h):
        for b in range(layer.filter_w):
            hs = slice(a * dh, a * dh + out_h)
            ws = slice(b * dw, b * dw + out_w)
            patch = xb[:, hs, ws, :].reshape(-1, layer.in_channels)
            grad_w[a, b] = patch.T @ g2
            grad_x[:, hs, ws, :] += gb @ layer.weights[a, b].T
    grad_bias = g2.sum(axis=0)
    return (grad_x[0] if squeeze else grad_x), grad_w, grad_bias


def dense_forward(x: np.ndarray, layer: DenseLayer) -> np.ndarray:
    if x.shape[-1] != layer.in_dim:
        raise DimensionError(f"dense input length {x.shape[-1]} != in_dim {layer.in_dim}")
    return x @ layer.weights + layer.bias


def dense_backward(
    x: np.ndarray, layer: DenseLayer, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if x.shape[-1] != layer.in_dim:
        raise DimensionError(f"dense input length {x.shape[-1]} != in_dim {layer.in_dim}")
    if upstream.shape != x.shape[:-1] + (layer.out_dim,):
        raise DimensionError(f"upstream gradient shape {upstream.shape} does not match dense output")
    x2 = x.reshape(-1, layer.in_dim)
    g2 = upstream.reshape(-1, layer.out_dim)
    grad_x = upstream @ layer.weights.T
    return grad_x, x2.T @ g2, g2.sum(axis=0)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def bce_loss(posteriors: np.ndarray, labels: np.ndarray, eps: float = BCE_EPS) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy over classes (and batch) and its gradient.

    Posteriors are clamped to ``[eps, 1 - eps]`` before the logarithm. The
    returned gradient is w.r.t. the unclamped posteriors, zero where the clamp
    is active.
    """
    posteriors = np.asarray(posteriors)
    labels = np.asarray(labels, dtype=posteriors.dtype)
    if posteriors.shape != labels.shape:
        raise DimensionError(f"posteriors {posteriors.shape} and labels {labels.shape} differ in shape")
    p = np.clip(posteriors, eps, 1 - eps)
    loss = -np.mean(labels * np.log(p) + (1 - labels) * np.log1p(-p))
    grad = (p - labels) / (p * (1 - p)) / labels.size
    grad = np.where((posteriors < eps) | (posteriors > 1 - eps), 0.0, grad)
    return float(loss), grad


# --------------------------------------------------------------------------
# model


@dataclass
class Model:
    """A phase-map CNN: ReLU conv stack, ReLU dense hidden layers, sigmoid output."""

    arch: ArchSpec
    conv_layers: list[ConvLayer]
    dense_layers: list[DenseLayer]
    dropout_rate: float = 0.0
    history: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.dense_layers[-1].out_dim != self.arch.n_classes:
            raise DimensionError("output layer width does not match the number of DOA classes")

    def parameters(self) -> list[np.ndarray]:
        params = []
        for layer in self.conv_layers:
            params += [layer.weights, layer.bias]
        for layer in self.dense_layers:
            params += [layer.weights, layer.bias]
        return params

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    @property
    def dtype(self):
        return self.conv_layers[0].weights.dtype

    def astype(self, dtype) -> "Model":
        return Model(
            arch=self.arch,
            conv_layers=[
                ConvLayer(l.weights.astype(dtype), l.bias.astype(dtype), l.dilation_h, l.dilation_w)
                for l in self.conv_layers
            ],
            dense_layers=[DenseLayer(l.weights.astype(dtype), l.bias.astype(dtype)) for l in self.dense_layers],
            dropout_rate=self.dropout_rate,
            history=dict(self.history),
        )


def init_model(arch: ArchSpec, seed: int = 0, dropout_rate: float = 0.0, dtype=np.float64) -> Model:
    """Build a model for ``arch`` with Glorot-uniform weights and zero biases."""
    from .arch import output_width, validate

    report = validate(arch, strict=False)
    if not report.ok:
        raise DimensionError(f"architecture {arch.name} is infeasible: {report.violations}")
    rng = np.random.default_rng(seed)

    def glorot(shape, fan_in, fan_out):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=shape).astype(dtype)

    conv_layers = []
    cin = 1
    for layer in arch.conv:
        fw, cout = layer.filter_w, layer.out_channels
        w = glorot((1, fw, cin, cout), fw * cin, fw * cout)
        conv_layers.append(ConvLayer(w, np.zeros(cout, dtype=dtype), 1, layer.dilation_w))
        cin = cout
    n_in = arch.K * output_width(arch, len(arch.conv) - 1) * cin
    dense_layers = []
    for n_out in list(arch.dense_hidden) + [arch.n_classes]:
        dense_layers.append(DenseLayer(glorot((n_in, n_out), n_in, n_out), np.zeros(n_out, dtype=dtype)))
        n_in = n_out
    return Model(arch, conv_layers, dense_layers, dropout_rate)


def _check_model_input(model: Model, x: np.ndarray) -> np.ndarray:
    xb, _ = _as_batch(x, 4)
    expected = (model.arch.K, model.arch.M, 1)
    if xb.shape[1:] != expected:
        raise DimensionError(f"input shape {xb.shape[1:]} does not match architecture input {expected}")
    return xb


def _forward(model: Model, xb: np.ndarray, training: bool, rng):
    """Forward pass returning logits and the cache needed by backprop."""
    cache = []
    h = xb.astype(model.dtype, copy=False)
    for layer in model.conv_layers:
        z = conv2d_forward(h, layer)
        cache.append(h)
        h = relu(z)
    h = h.reshape(h.shape[0], -1)
    masks = []
    for layer in model.dense_layers[:-1]:
        z = dense_forward(h, layer)
        cache.append(h)
        h = relu(z)
        if training and model.dropout_rate > 0:
            keep = 1.0 - model.dropout_rate
            mask = (rng.random(h.shape) < keep).astype(h.dtype) / keep
            h = h * mask
            masks.append(mask)
        else:
            masks.append(None)
    cache.append(h)
    logits = dense_forward(h, model.dense_layers[-1])
    return logits, cache, masks


def model_forward(model: Model, x: np.ndarray, training: bool = False, rng=None) -> np.ndarray:
    """Per-class posteriors for one phase map ``(K, M, 1)`` or a batch ``(N, K, M, 1)``.

    Dropout is only applied when ``training`` is set; inference is deterministic.
    """
    squeeze = x.ndim == 3
    xb = _check_model_input(model, x)
    if training and rng is None:
        rng = np.random.default_rng()
    logits, _, _ = _forward(model, xb, training, rng)
    p = sigmoid(logits)
    return p[0] if squeeze else p


def loss_and_grads(
    model: Model, x: np.ndarray, labels: np.ndarray, training: bool = False, rng=None
) -> tuple[float, list[np.ndarray]]:
    """Mean BCE loss over a batch and its gradient for every parameter.

    Gradients follow the order of :meth:`Model.parameters`. The output
    nonlinearity and the loss are differentiated jointly in logit space.
    """
    xb = _check_model_input(model, x)
    labels = np.asarray(labels, dtype=model.dtype).reshape(xb.shape[0], -1)
    logits, cache, masks = _forward(model, xb, training, rng if rng is not None else np.random.default_rng())
    p = sigmoid(logits)
    loss, _ = bce_loss(p, labels)
    # d(mean BCE)/d(logit) = (p - y) / n, exact wherever the clamp is inactive
    g = (np.clip(p, BCE_EPS, 1 - BCE_EPS) - labels) / labels.size
    n_conv = len(model.conv_layers)
    dense_grads = []
    for i in range(len(model.dense_layers) - 1, -1, -1):
        layer = model.dense_layers[i]
        h_in = cache[n_conv + i]
        g, gw, gbias = dense_backward(h_in, layer, g)
        dense_grads = [gw, gbias] + dense_grads
        if i > 0:
            mask = masks[i - 1]
            if mask is not None:
                g = g * mask
            # ReLU output h_in > 0 iff pre-activation > 0 (dropout keeps sign)
            g = g * (h_in > 0)
    last = model.conv_layers[-1]
    out_h, out_w = last.output_shape(*cache[n_conv - 1].shape[1:3])
    g = g.reshape(xb.shape[0], out_h, out_w, last.out_channels)
    # cache[i + 1] is the ReLU output of conv layer i (flattened for the last one)
    activations = cache[1:n_conv] + [cache[n_conv].reshape(g.shape)]
    conv_grads = []
    for i in range(n_conv - 1, -1, -1):
        g = g * (activations[i] > 0)
        g, gw, gbias = conv2d_backward(cache[i], model.conv_layers[i], g)
        conv_grads = [gw, gbias] + conv_grads
    return loss, conv_grads + dense_grads


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: list[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("params, grads and optimizer state have different lengths")
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise DimensionError(f"parameter shape {p.shape} != gradient shape {g.shape}")
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    return state


# --------------------------------------------------------------------------
# model file


def save_model(model: Model, fh: BinaryIO | str, extra: dict[str, str] | None = None) -> None:
    """Write ``model`` in the versioned binary model format.

    Layout: ``b"DDOA"``, u32 version, u32 descriptor length, UTF-8 descriptor
    (architecture key=value lines plus dropout and any ``extra`` keys), then for
    every layer the weights and bias as u64 element count followed by
    little-endian float64 values, and finally a u32 CRC32 of all preceding bytes.
    """
    desc = arch_to_text(model.arch)
    desc += f"dropout_rate={model.dropout_rate!r}\n"
    for key, value in sorted((extra or {}).items()):
        desc += f"{key}={value}\n"
    desc_bytes = desc.encode("utf-8")
    parts = [MODEL_MAGIC, struct.pack("<II", MODEL_FORMAT_VERSION, len(desc_bytes)), desc_bytes]
    for p in model.parameters():
        parts.append(struct.pack("<Q", p.size))
        parts.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    payload = b"".join(parts)
    blob = payload + struct.pack("<I", zlib.crc32(payload))
    if isinstance(fh, (str, bytes)) or hasattr(fh, "__fspath__"):
        with open(fh, "wb") as f:
            f.write(blob)
    else:
        fh.write(blob)


def load_model(fh: BinaryIO | str) -> tuple[Model, dict[str, str]]:
    """Read a model file; returns the model and the descriptor's extra keys."""
    if isinstance(fh, (str, bytes)) or hasattr(fh, "__fspath__"):
        with open(fh, "rb") as f:
            blob = f.read()
    else:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != MODEL_MAGIC:
        raise ModelFormatError("not a DDOA model file")
    payload, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) != crc:
        raise ModelFormatError("checksum mismatch: model file is corrupt")
    version, desc_len = struct.unpack_from("<II", payload, 4)
    if version != MODEL_FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {version}")
    offset = 12
    desc = payload[offset : offset + desc_len].decode("utf-8")
    offset += desc_len
    arch, extra = arch_from_text(desc, return_extra=True)
    dropout = float(extra.pop("dropout_rate", "0.0"))
    model = init_model(arch, dropout_rate=dropout)
    for p in model.parameters():
        (count,) = struct.unpack_from("<Q", payload, offset)
        offset += 8
        if count != p.size:
            raise ModelFormatError(f"parameter blob has {count} values, architecture expects {p.size}")
        p[...] = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).reshape(p.shape)
        offset += 8 * count
    if offset != len(payload):
        raise ModelFormatError("trailing bytes after parameter blobs")
    return model, extra
