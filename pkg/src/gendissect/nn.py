"""Minimal dense-tensor ops and a forward executor for small convolutional generators.

Tensors are plain numpy arrays: rank 3 ``(channels, height, width)`` or rank 4
with a leading batch axis, stored as 32-bit floats. Convolution follows the
cross-correlation convention (no kernel flip) with zero padding; reductions
accumulate in 64-bit so downstream statistics stay stable.

A :class:`NetworkSpec` is an ordered list of layers with a designated
``split_index``. Layers ``[0, split_index)`` map the latent vector to the
internal featuremap ``r``; layers ``[split_index, len)`` complete the image.
``forward_from`` resumes execution at the split so intervention code can
modify ``r`` and re-render.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

DTYPE = np.float32

LAYER_KINDS = ("dense", "conv2d", "upsample-nearest", "leaky-relu", "tanh", "pixelnorm")

PIXELNORM_EPS = 1e-8


class ShapeMismatchError(ValueError):
    """Raised when an operation receives tensors with incompatible extents."""


class NonFiniteError(ArithmeticError):
    """Raised when a layer produces NaN or infinite values."""

    def __init__(self, layer_index: int, kind: str):
        self.layer_index = layer_index
        self.kind = kind
        super().__init__(f"layer {layer_index} ({kind}) produced non-finite values")


def conv2d(x: np.ndarray, kernel: np.ndarray, bias: Optional[np.ndarray] = None,
           stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlate ``x`` with ``kernel``.

    Args:
        x: input of shape (C, H, W) or (N, C, H, W).
        kernel: weights of shape (O, C, kh, kw).
        bias: per-output-channel offsets of shape (O,); zeros when omitted.
        stride: step between output positions, >= 1.
        padding: symmetric zero padding applied to both spatial axes.

    Returns:
        Output of shape (..., O, Ho, Wo) with
        ``Ho = (H + 2*padding - kh) // stride + 1``.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")
    given_shape = x.shape
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeMismatchError(
            f"conv2d expects rank-4 input and kernel, got input {given_shape}, kernel {kernel.shape}")
    n, c, h, w = x.shape
    out_c, in_c, kh, kw = kernel.shape
    if in_c != c:
        raise ShapeMismatchError(
            f"kernel input channels {in_c} do not match input channels {c} "
            f"(input {given_shape}, kernel {kernel.shape})")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeMismatchError(
            f"kernel {kernel.shape} larger than padded input {(h + 2 * padding, w + 2 * padding)}")
    if bias is None:
        bias = np.zeros(out_c, dtype=DTYPE)
    if bias.shape != (out_c,):
        raise ShapeMismatchError(f"bias shape {bias.shape} does not match output channels {out_c}")

    out_dtype = DTYPE if x.dtype != np.float64 else np.float64
    x64 = x.astype(np.float64, copy=False)
    k64 = kernel.astype(np.float64)
    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        # pointwise conv: a single channel-mixing GEMM, no window extraction
        out = np.tensordot(x64, k64[:, :, 0, 0], axes=([1], [1]))
        out = out.transpose(0, 3, 1, 2)
    elif stride == 1:
        # shift-and-add: one channel GEMM per nonzero kernel tap
        if padding:
            x64 = np.pad(x64, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        ho = x64.shape[2] - kh + 1
        wo = x64.shape[3] - kw + 1
        out = np.zeros((n, out_c, ho, wo))
        for dy in range(kh):
            for dx in range(kw):
                tap = k64[:, :, dy, dx]
                if not tap.any():
                    continue
                shifted = x64[:, :, dy:dy + ho, dx:dx + wo]
                out += np.tensordot(shifted, tap, axes=([1], [1])).transpose(0, 3, 1, 2)
    else:
        if padding:
            x64 = np.pad(x64, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        windows = np.lib.stride_tricks.sliding_window_view(x64, (kh, kw), axis=(2, 3))
        windows = windows[:, :, ::stride, ::stride]      # (N, C, Ho, Wo, kh, kw)
        ho, wo = windows.shape[2], windows.shape[3]
        # One GEMM in float64; row layout (N*Ho*Wo, C*kh*kw).
        cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
        flat = cols @ k64.reshape(out_c, -1).T
        out = flat.reshape(n, ho, wo, out_c).transpose(0, 3, 1, 2)
    out = (out + bias.astype(np.float64)[None, :, None, None]).astype(out_dtype)
    return out[0] if squeeze else out


def upsample_nearest(x: np.ndarray, factor: int) -> np.ndarray:
    """Replicate every value of the spatial grid into a ``factor``x``factor`` block."""
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ValueError(f"upsample factor must be an integer >= 1, got {factor!r}")
    if factor == 1:
        return x
    return np.repeat(np.repeat(x, factor, axis=-2), factor, axis=-1)


def leaky_relu(x: np.ndarray, slope: float) -> np.ndarray:
    if slope == 0.0:
        return np.maximum(x, 0.0)
    return np.where(x >= 0, x, x.dtype.type(slope) * x)


def tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def pixelnorm(x: np.ndarray, eps: float = PIXELNORM_EPS) -> np.ndarray:
    """Divide each spatial location's channel vector by sqrt(mean of squares + eps)."""
    if x.shape[-3] < 1:
        raise ShapeMismatchError(f"pixelnorm requires >= 1 channel, got shape {x.shape}")
    ms = np.mean(np.square(x.astype(np.float64, copy=False)), axis=-3, keepdims=True)
    return (x / np.sqrt(ms + eps)).astype(x.dtype, copy=False)


@dataclass(eq=False)
class LayerSpec:
    """One layer of a generator: parameters for exactly one of the layer kinds.

    dense layers carry ``kernel`` (out, in) and ``bias`` (out,) plus an optional
    ``out_shape`` used to reshape the output vector into a featuremap. conv2d
    layers carry ``kernel`` (out_c, in_c, kh, kw), ``bias``, ``stride`` and
    ``padding``. upsample-nearest uses ``factor``; leaky-relu uses ``slope``.
    """

    kind: str
    kernel: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None
    stride: int = 1
    padding: int = 0
    factor: int = 1
    slope: float = 0.0
    out_shape: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("dense", "conv2d"):
            if self.kernel is None:
                raise ValueError(f"{self.kind} layer requires a kernel")
            self.kernel = np.asarray(self.kernel, dtype=DTYPE)
            out = self.kernel.shape[0]
            if self.bias is None:
                self.bias = np.zeros(out, dtype=DTYPE)
            else:
                self.bias = np.asarray(self.bias, dtype=DTYPE)
        if self.kind == "upsample-nearest" and (not isinstance(self.factor, (int, np.integer)) or self.factor < 1):
            raise ValueError(f"upsample factor must be an integer >= 1, got {self.factor!r}")
        if self.out_shape is not None:
            self.out_shape = tuple(int(v) for v in self.out_shape)


@dataclass(eq=False)
class NetworkSpec:
    """Ordered layer list with the h/f split point and latent dimensionality."""

    layers: list
    split_index: int
    latent_dim: int

    def __post_init__(self):
        if not 1 <= self.split_index < len(self.layers):
            raise ValueError(
                f"split_index {self.split_index} outside [1, {len(self.layers)})")

    def validate(self) -> list:
        """Infer every layer's output shape from the latent, checking compatibility.

        Returns the list of output shapes; raises ShapeMismatchError on any
        channel or rank incompatibility, including a non-featuremap split or a
        non-3-channel output layer.
        """
        shapes = infer_shapes(self)
        if len(shapes[self.split_index - 1]) != 3:
            raise ShapeMismatchError(
                f"split layer output {shapes[self.split_index - 1]} is not a rank-3 featuremap")
        if shapes[-1][0] != 3:
            raise ShapeMismatchError(f"output layer produces {shapes[-1][0]} channels, expected 3")
        return shapes


def _layer_out_shape(layer: LayerSpec, shape: tuple) -> tuple:
    kind = layer.kind
    if kind == "dense":
        if len(shape) != 1:
            raise ShapeMismatchError(f"dense layer expects a vector input, got shape {shape}")
        out, inp = layer.kernel.shape
        if inp != shape[0]:
            raise ShapeMismatchError(f"dense kernel expects {inp} inputs, got {shape[0]}")
        if layer.out_shape is not None:
            if int(np.prod(layer.out_shape)) != out:
                raise ShapeMismatchError(
                    f"dense out_shape {layer.out_shape} incompatible with {out} outputs")
            return layer.out_shape
        return (out,)
    if kind == "conv2d":
        if len(shape) != 3:
            raise ShapeMismatchError(f"conv2d expects a rank-3 input, got shape {shape}")
        out_c, in_c, kh, kw = layer.kernel.shape
        if in_c != shape[0]:
            raise ShapeMismatchError(
                f"conv kernel expects {in_c} input channels, got {shape[0]}")
        h = (shape[1] + 2 * layer.padding - kh) // layer.stride + 1
        w = (shape[2] + 2 * layer.padding - kw) // layer.stride + 1
        if h < 1 or w < 1:
            raise ShapeMismatchError(f"conv output collapses to {(h, w)} for input {shape}")
        return (out_c, h, w)
    if kind == "upsample-nearest":
        if len(shape) != 3:
            raise ShapeMismatchError(f"upsample expects a rank-3 input, got shape {shape}")
        return (shape[0], shape[1] * layer.factor, shape[2] * layer.factor)
    return shape


def infer_shapes(net: NetworkSpec) -> list:
    """Per-layer output shapes (batch axis excluded) starting from the latent."""
    shape = (net.latent_dim,)
    shapes = []
    for layer in net.layers:
        shape = _layer_out_shape(layer, shape)
        shapes.append(shape)
    return shapes


def _apply(layer: LayerSpec, x: np.ndarray) -> np.ndarray:
    kind = layer.kind
    if kind == "dense":
        flat = (x.astype(np.float64, copy=False) @ layer.kernel.T.astype(np.float64)
                + layer.bias.astype(np.float64))
        if x.dtype != np.float64:
            flat = flat.astype(DTYPE)
        if layer.out_shape is not None:
            if flat.ndim == 2:
                return flat.reshape((flat.shape[0],) + layer.out_shape)
            return flat.reshape(layer.out_shape)
        return flat
    if kind == "conv2d":
        return conv2d(x, layer.kernel, layer.bias, layer.stride, layer.padding)
    if kind == "upsample-nearest":
        return upsample_nearest(x, layer.factor)
    if kind == "leaky-relu":
        return leaky_relu(x, layer.slope)
    if kind == "tanh":
        return tanh(x)
    if kind == "pixelnorm":
        return pixelnorm(x)
    raise ValueError(f"unknown layer kind {kind!r}")


@dataclass
class ForwardResult:
    image: np.ndarray
    featuremap: np.ndarray
    outputs: Optional[list] = None


def _run(layers: Sequence[LayerSpec], x: np.ndarray, first_index: int, trace: bool):
    # execution stays in float64 end to end; public tensors are rounded to
    # 32-bit at the boundaries (and per layer when tracing)
    outputs = [] if trace else None
    x = x.astype(np.float64, copy=False)
    f32_max = float(np.finfo(DTYPE).max)
    for i, layer in enumerate(layers):
        x = _apply(layer, x)
        peak = float(np.abs(x).max()) if x.size else 0.0
        if not np.isfinite(peak) or peak > f32_max:
            raise NonFiniteError(first_index + i, layer.kind)
        if trace:
            outputs.append(x.astype(DTYPE))
    return x.astype(DTYPE), outputs


def forward(net: NetworkSpec, z: np.ndarray, trace: bool = False) -> ForwardResult:
    """Run the full generator; returns the image, the split featuremap and,
    when ``trace`` is set, every layer output."""
    z = np.asarray(z, dtype=DTYPE)
    if z.shape[-1] != net.latent_dim:
        raise ShapeMismatchError(
            f"latent length {z.shape[-1]} does not match latent_dim {net.latent_dim}")
    r, head = _run(net.layers[:net.split_index], z, 0, trace)
    # resume from the rounded featuremap so forward_from(h(z)) is bit-identical
    image, tail = _run(net.layers[net.split_index:], r, net.split_index, trace)
    outputs = (head + tail) if trace else None
    return ForwardResult(image=image, featuremap=r, outputs=outputs)


def forward_from(net: NetworkSpec, r: np.ndarray, trace: bool = False):
    """Resume execution at the split layer from a (possibly modified) featuremap.

    Returns the image, or ``(image, outputs)`` when ``trace`` is set.
    """
    r = np.asarray(r, dtype=DTYPE)
    expected = infer_shapes(net)[net.split_index - 1]
    if r.shape[-3:] != expected:
        raise ShapeMismatchError(
            f"featuremap shape {r.shape[-3:]} does not match split layer output {expected}")
    image, outputs = _run(net.layers[net.split_index:], r, net.split_index, trace)
    if trace:
        return image, outputs
    return image
