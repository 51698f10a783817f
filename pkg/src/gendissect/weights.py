"""Binary weight-file format for generator networks.

Layout (all integers little-endian):

    magic   4 bytes  b"GDW1"
    u32     layer count
    per layer:
        u8      kind tag (1 dense, 2 conv2d, 3 upsample-nearest,
                          4 leaky-relu, 5 tanh, 6 pixelnorm)
        u32     ndims, then ndims * u32 dims:
                  dense:    [out, in, *out_shape]   (out_shape may be empty)
                  conv2d:   [out_c, in_c, kh, kw, stride, padding]
                  upsample: [factor]
                  others:   []
        f32[]   payload:
                  dense:    kernel (out*in) then bias (out)
                  conv2d:   kernel (out_c*in_c*kh*kw) then bias (out_c)
                  leaky-relu: [slope]
                  others:   []
    footer:
        u32     split_index
        u32     latent_dim
        u32     CRC32 of everything before the footer

Round trips are bit-exact; payloads are raw 32-bit reals in row-major order.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .nn import DTYPE, LayerSpec, NetworkSpec

MAGIC = b"GDW1"

_KIND_TAGS = {
    "dense": 1,
    "conv2d": 2,
    "upsample-nearest": 3,
    "leaky-relu": 4,
    "tanh": 5,
    "pixelnorm": 6,
}
_TAG_KINDS = {v: k for k, v in _KIND_TAGS.items()}


class WeightFormatError(Exception):
    """Base class for weight-file errors."""


class BadMagicError(WeightFormatError):
    pass


class TruncatedFileError(WeightFormatError):
    pass


class DimensionMismatchError(WeightFormatError):
    pass


class ChecksumError(WeightFormatError):
    pass


def _layer_record(layer: LayerSpec) -> bytes:
    kind = layer.kind
    parts = [struct.pack("<B", _KIND_TAGS[kind])]
    if kind == "dense":
        out, inp = layer.kernel.shape
        dims = [out, inp] + list(layer.out_shape or ())
        payload = np.concatenate([layer.kernel.ravel(), layer.bias]).astype(DTYPE)
    elif kind == "conv2d":
        dims = list(layer.kernel.shape) + [layer.stride, layer.padding]
        payload = np.concatenate([layer.kernel.ravel(), layer.bias]).astype(DTYPE)
    elif kind == "upsample-nearest":
        dims = [layer.factor]
        payload = np.zeros(0, dtype=DTYPE)
    elif kind == "leaky-relu":
        dims = []
        payload = np.array([layer.slope], dtype=DTYPE)
    else:
        dims = []
        payload = np.zeros(0, dtype=DTYPE)
    parts.append(struct.pack("<I", len(dims)))
    parts.append(struct.pack(f"<{len(dims)}I", *dims) if dims else b"")
    parts.append(payload.astype("<f4").tobytes())
    return b"".join(parts)


def save_weights(net: NetworkSpec, path) -> None:
    """Write ``net`` to ``path`` in the GDW1 format."""
    body = [MAGIC, struct.pack("<I", len(net.layers))]
    body.extend(_layer_record(layer) for layer in net.layers)
    blob = b"".join(body)
    footer = struct.pack("<III", net.split_index, net.latent_dim, zlib.crc32(blob))
    with open(path, "wb") as fh:
        fh.write(blob + footer)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"file truncated while reading {what} at offset {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def floats(self, n: int, what: str) -> np.ndarray:
        raw = self.take(4 * n, what)
        return np.frombuffer(raw, dtype="<f4").astype(DTYPE)


def _read_layer(reader: _Reader, index: int) -> LayerSpec:
    tag = reader.take(1, f"layer {index} kind")[0]
    kind = _TAG_KINDS.get(tag)
    if kind is None:
        raise DimensionMismatchError(f"layer {index}: unknown kind tag {tag}")
    ndims = reader.u32(f"layer {index} ndims")
    if ndims > 16:
        raise DimensionMismatchError(f"layer {index}: implausible dim count {ndims}")
    dims = [reader.u32(f"layer {index} dim") for _ in range(ndims)]
    if kind == "dense":
        if ndims < 2:
            raise DimensionMismatchError(f"layer {index}: dense needs >= 2 dims, got {dims}")
        out, inp = dims[0], dims[1]
        out_shape = tuple(dims[2:]) or None
        if out_shape is not None and int(np.prod(out_shape)) != out:
            raise DimensionMismatchError(
                f"layer {index}: dense out_shape {out_shape} inconsistent with {out} outputs")
        payload = reader.floats(out * inp + out, f"layer {index} payload")
        return LayerSpec("dense", kernel=payload[:out * inp].reshape(out, inp),
                         bias=payload[out * inp:], out_shape=out_shape)
    if kind == "conv2d":
        if ndims != 6:
            raise DimensionMismatchError(f"layer {index}: conv2d needs 6 dims, got {dims}")
        out_c, in_c, kh, kw, stride, padding = dims
        count = out_c * in_c * kh * kw
        payload = reader.floats(count + out_c, f"layer {index} payload")
        return LayerSpec("conv2d", kernel=payload[:count].reshape(out_c, in_c, kh, kw),
                         bias=payload[count:], stride=stride, padding=padding)
    if kind == "upsample-nearest":
        if ndims != 1 or dims[0] < 1:
            raise DimensionMismatchError(f"layer {index}: bad upsample dims {dims}")
        return LayerSpec("upsample-nearest", factor=dims[0])
    if kind == "leaky-relu":
        slope = reader.floats(1, f"layer {index} payload")[0]
        return LayerSpec("leaky-relu", slope=float(slope))
    return LayerSpec(kind)


def load_weights(path) -> NetworkSpec:
    """Read a GDW1 file back into a :class:`NetworkSpec`.

    Raises :class:`BadMagicError`, :class:`TruncatedFileError`,
    :class:`DimensionMismatchError`, or :class:`ChecksumError` on malformed
    input; each condition maps to a distinct class.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < 4 + 4 + 12:
        raise TruncatedFileError("file shorter than header plus footer")
    body, footer = data[:-12], data[-12:]
    split_index, latent_dim, crc = struct.unpack("<III", footer)
    if zlib.crc32(body) != crc:
        raise ChecksumError("body CRC32 does not match footer")

    reader = _Reader(body)
    reader.take(4, "magic")
    n_layers = reader.u32("layer count")
    layers = [_read_layer(reader, i) for i in range(n_layers)]
    if reader.pos != len(body):
        raise DimensionMismatchError(
            f"{len(body) - reader.pos} trailing bytes after last layer")
    try:
        return NetworkSpec(layers=layers, split_index=split_index, latent_dim=latent_dim)
    except ValueError as exc:
        raise DimensionMismatchError(str(exc)) from exc
