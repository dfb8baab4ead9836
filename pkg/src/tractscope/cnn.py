"""Forward-only CNN engine, CNW1 weight format, and image descriptors.

Tensors are plain float32 numpy arrays shaped (C, H, W), or 1-D after a
fully connected layer. Dot products accumulate in float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .acquisition import RasterImage

MAGIC = b"CNW1"
VERSION = 1
TAG_CONV, TAG_RELU, TAG_MAXPOOL, TAG_LRN, TAG_FC = range(5)

BASELINE_ID = "baseline-v1"
BASELINE_DIM = 208


class NetworkError(ValueError):
    pass


class WeightFormatError(NetworkError):
    pass


@dataclass(frozen=True, eq=False)
class Conv:
    name: str
    weights: np.ndarray  # (out, in, kh, kw) float32
    bias: np.ndarray  # (out,)
    stride: int = 1
    pad: int = 0

    @property
    def out_ch(self):
        return self.weights.shape[0]

    @property
    def in_ch(self):
        return self.weights.shape[1]

    @cached_property
    def _w64(self):
        return self.weights.reshape(self.out_ch, -1).astype(np.float64)


@dataclass(frozen=True)
class ReLU:
    name: str


@dataclass(frozen=True)
class MaxPool:
    name: str
    k: int
    stride: int = 1
    pad: int = 0


@dataclass(frozen=True)
class LRN:
    name: str
    k: float = 2.0
    alpha: float = 1e-4
    beta: float = 0.75
    n: int = 5


@dataclass(frozen=True, eq=False)
class FullyConnected:
    name: str
    weights: np.ndarray  # (out, in) float32
    bias: np.ndarray

    @cached_property
    def _w64(self):
        return self.weights.astype(np.float64)


Layer = Union[Conv, ReLU, MaxPool, LRN, FullyConnected]


@dataclass(frozen=True, eq=False)
class NetworkSpec:
    input_dims: tuple[int, int, int]
    channel_means: tuple[float, float, float]
    layers: tuple[Layer, ...] = field(default_factory=tuple)

    def __post_init__(self):
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise NetworkError("duplicate layer name")
        infer_shapes(self)

    def layer_index(self, name: str) -> int:
        for i, l in enumerate(self.layers):
            if l.name == name:
                return i
        raise NetworkError(f"unknown layer {name!r}")


@dataclass(frozen=True, eq=False)
class FeatureVector:
    values: np.ndarray
    extractor_id: str
    layer_name: str


def _out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def infer_shapes(net: NetworkSpec) -> list[tuple[int, ...]]:
    """Output dims of every layer; raises NetworkError on any chaining mismatch."""
    dims: tuple[int, ...] = tuple(net.input_dims)
    out = []
    for layer in net.layers:
        if isinstance(layer, Conv):
            if len(dims) != 3 or dims[0] != layer.in_ch:
                raise NetworkError(f"layer {layer.name}: expects {layer.in_ch} channels, got dims {dims}")
            _, kh, kw = layer.weights.shape[1:]
            if layer.bias.shape != (layer.out_ch,):
                raise NetworkError(f"layer {layer.name}: bias size mismatch")
            if kh > dims[1] + 2 * layer.pad or kw > dims[2] + 2 * layer.pad:
                raise NetworkError(f"layer {layer.name}: kernel larger than padded input")
            dims = (layer.out_ch, _out_size(dims[1], kh, layer.stride, layer.pad),
                    _out_size(dims[2], kw, layer.stride, layer.pad))
        elif isinstance(layer, MaxPool):
            if len(dims) != 3 or layer.k > dims[1] + 2 * layer.pad or layer.k > dims[2] + 2 * layer.pad:
                raise NetworkError(f"layer {layer.name}: pooling window larger than padded input")
            dims = (dims[0], _out_size(dims[1], layer.k, layer.stride, layer.pad),
                    _out_size(dims[2], layer.k, layer.stride, layer.pad))
        elif isinstance(layer, FullyConnected):
            n_in = int(np.prod(dims))
            if layer.weights.ndim != 2 or layer.weights.shape[1] != n_in:
                raise NetworkError(f"layer {layer.name}: expects input length {layer.weights.shape[-1]}, got {n_in}")
            if layer.bias.shape != (layer.weights.shape[0],):
                raise NetworkError(f"layer {layer.name}: bias size mismatch")
            dims = (layer.weights.shape[0],)
        elif isinstance(layer, LRN):
            if layer.n < 1 or layer.n % 2 == 0:
                raise NetworkError(f"layer {layer.name}: LRN window must be odd")
        out.append(dims)
    return out


# ---------------------------------------------------------------------------
# layer operations


def conv2d(x: np.ndarray, layer: Conv) -> np.ndarray:
    """Zero-padded cross-correlation via im2col and one matrix product."""
    c, h, w = x.shape
    if c != layer.in_ch:
        raise NetworkError(f"conv {layer.name}: input has {c} channels, expected {layer.in_ch}")
    kh, kw = layer.weights.shape[2:]
    p, s = layer.pad, layer.stride
    if kh > h + 2 * p or kw > w + 2 * p:
        raise NetworkError(f"conv {layer.name}: kernel larger than padded input")
    xp = np.pad(x, ((0, 0), (p, p), (p, p))) if p else x
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::s, ::s]  # (C, Ho, Wo, kh, kw)
    ho, wo = win.shape[1:3]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c * kh * kw, ho * wo).astype(np.float64)
    out = layer._w64 @ cols + layer.bias.astype(np.float64)[:, None]
    return out.reshape(layer.out_ch, ho, wo).astype(np.float32)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(np.float32, copy=False)


def max_pool(x: np.ndarray, k: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Per-channel window maximum; padding cells are -inf and never win."""
    if k < 1 or stride < 1:
        raise NetworkError("pool size and stride must be >= 1")
    c, h, w = x.shape
    if k > h + 2 * pad or k > w + 2 * pad:
        raise NetworkError("pooling window larger than padded input")
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf) if pad else x
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    return win.max(axis=(3, 4)).astype(np.float32)


def lrn(x: np.ndarray, k: float, alpha: float, beta: float, n: int) -> np.ndarray:
    """Cross-channel normalisation ``a_c / (k + alpha/n * sum a^2)^beta``, window clipped at the edges."""
    if n < 1 or n % 2 == 0:
        raise NetworkError("LRN window must be odd")
    sq = x.astype(np.float64) ** 2
    c = x.shape[0]
    csum = np.concatenate([np.zeros((1,) + x.shape[1:]), np.cumsum(sq, axis=0)])
    half = n // 2
    lo = np.clip(np.arange(c) - half, 0, c)
    hi = np.clip(np.arange(c) + half + 1, 0, c)
    window = csum[hi] - csum[lo]
    return (x / (k + alpha / n * window) ** beta).astype(np.float32)


def fully_connected(x: np.ndarray, layer: FullyConnected) -> np.ndarray:
    flat = x.reshape(-1).astype(np.float64)
    if flat.size != layer.weights.shape[1]:
        raise NetworkError(f"fc {layer.name}: input length {flat.size}, expected {layer.weights.shape[1]}")
    return (layer._w64 @ flat + layer.bias.astype(np.float64)).astype(np.float32)


def apply_layer(x: np.ndarray, layer: Layer) -> np.ndarray:
    if isinstance(layer, Conv):
        return conv2d(x, layer)
    if isinstance(layer, ReLU):
        return relu(x)
    if isinstance(layer, MaxPool):
        return max_pool(x, layer.k, layer.stride, layer.pad)
    if isinstance(layer, LRN):
        return lrn(x, layer.k, layer.alpha, layer.beta, layer.n)
    if isinstance(layer, FullyConnected):
        return fully_connected(x, layer)
    raise NetworkError(f"unsupported layer {layer!r}")


def forward_to_layer(net: NetworkSpec, x: np.ndarray, layer_name: str) -> FeatureVector:
    """Run layers in order through ``layer_name`` inclusive and flatten the result."""
    stop = net.layer_index(layer_name)
    out = np.asarray(x, dtype=np.float32)
    if out.shape != tuple(net.input_dims):
        raise NetworkError(f"input dims {out.shape} != network input {tuple(net.input_dims)}")
    for layer in net.layers[: stop + 1]:
        out = apply_layer(out, layer)
    return FeatureVector(out.reshape(-1), f"cnn:{layer_name}", layer_name)


# ---------------------------------------------------------------------------
# preprocessing


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an (H, W, C) array with half-pixel centers and edge clamping."""
    h, w = img.shape[:2]
    src = img.astype(np.float64)

    def coords(n_out, n_in):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        i0 = np.floor(pos).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, pos - i0

    y0, y1, fy = coords(out_h, h)
    x0, x1, fx = coords(out_w, w)
    top = src[y0][:, x0] * (1 - fx)[None, :, None] + src[y0][:, x1] * fx[None, :, None]
    bot = src[y1][:, x0] * (1 - fx)[None, :, None] + src[y1][:, x1] * fx[None, :, None]
    return top * (1 - fy)[:, None, None] + bot * fy[:, None, None]


def preprocess(image: RasterImage, net: NetworkSpec) -> np.ndarray:
    """Resize to the network input, subtract channel means, return CHW float32."""
    _, h, w = net.input_dims
    if (image.height, image.width) == (h, w):
        arr = image.data.astype(np.float64)
    else:
        arr = resize_bilinear(image.data, h, w)
    arr = arr - np.asarray(net.channel_means, dtype=np.float64)[None, None, :]
    return np.ascontiguousarray(arr.transpose(2, 0, 1), dtype=np.float32)


# ---------------------------------------------------------------------------
# weight-free descriptor


def _cell_means(a: np.ndarray) -> list[float]:
    out = []
    for band in np.array_split(a, 2, axis=0):
        for cell in np.array_split(band, 2, axis=1):
            out.append(float(cell.mean()) if cell.size else 0.0)
    return out


def baseline_descriptor(image: RasterImage) -> FeatureVector:
    """208 values: 64-bin histogram per RGB channel (each summing to 1), then
    gradient statistics of the gray image on a 2x2 grid of cells.

    Per cell, in order: mean |dx|, mean |dy|, mean dx^2, mean dy^2, with
    gray = channel mean / 255 and dx, dy forward differences.
    """
    data = image.data
    n_px = image.width * image.height
    hists = []
    for ch in range(3):
        counts = np.bincount((data[:, :, ch] >> 2).ravel(), minlength=64)
        hists.append(counts / n_px)
    gray = data.astype(np.float64).mean(axis=2) / 255.0
    dx = np.diff(gray, axis=1)
    dy = np.diff(gray, axis=0)
    cells = []
    for stats in zip(_cell_means(np.abs(dx)), _cell_means(np.abs(dy)), _cell_means(dx * dx), _cell_means(dy * dy)):
        cells.extend(stats)
    values = np.concatenate(hists + [np.array(cells)])
    return FeatureVector(values, BASELINE_ID, "baseline")


# ---------------------------------------------------------------------------
# activation maps


def activation_maps(net: NetworkSpec, x: np.ndarray, layer_name: str) -> list[np.ndarray]:
    """Per-filter response grids of a conv layer, after its ReLU when one follows."""
    idx = net.layer_index(layer_name)
    if not isinstance(net.layers[idx], Conv):
        raise NetworkError(f"layer {layer_name!r} is not a convolutional layer")
    out = forward_to_layer(net, x, layer_name).values
    _, h, w = infer_shapes(net)[idx]
    out = out.reshape(-1, h, w)
    if idx + 1 < len(net.layers) and isinstance(net.layers[idx + 1], ReLU):
        out = relu(out)
    return [out[c] for c in range(out.shape[0])]


def to_pgm(grid: np.ndarray) -> bytes:
    """Binary PGM of ``grid`` min-max scaled to 0..255; flat grids map to 0."""
    g = np.asarray(grid, dtype=np.float64)
    lo, hi = float(g.min()), float(g.max())
    scaled = np.zeros(g.shape) if hi == lo else (g - lo) / (hi - lo) * 255.0
    pix = np.rint(scaled).astype(np.uint8)
    return f"P5\n{g.shape[1]} {g.shape[0]}\n255\n".encode() + pix.tobytes()


def write_activation_maps(grids: list[np.ndarray], out_dir, prefix: str = "map") -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, g in enumerate(grids):
        path = out_dir / f"{prefix}_{i:03d}.pgm"
        path.write_bytes(to_pgm(g))
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# CNW1 weight files


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise WeightFormatError(f"truncated payload at byte {self.pos}")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32)


def parse_weights(payload: bytes) -> NetworkSpec:
    r = _Reader(payload)
    if r.take(4) != MAGIC:
        raise WeightFormatError("bad magic")
    (version,) = r.unpack("I")
    if version != VERSION:
        raise WeightFormatError(f"unsupported version {version}")
    c, h, w = r.unpack("3I")
    means = r.unpack("3f")
    (count,) = r.unpack("I")
    layers: list[Layer] = []
    seen = set()
    for _ in range(count):
        (tag,) = r.unpack("B")
        (name_len,) = r.unpack("H")
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise WeightFormatError("layer name is not UTF-8") from None
        if name in seen:
            raise WeightFormatError(f"duplicate layer name {name!r}")
        seen.add(name)
        if tag == TAG_CONV:
            out, inp, kh, kw, stride, pad = r.unpack("6I")
            weights = r.floats(out * inp * kh * kw).reshape(out, inp, kh, kw)
            layers.append(Conv(name, weights, r.floats(out), stride, pad))
        elif tag == TAG_RELU:
            layers.append(ReLU(name))
        elif tag == TAG_MAXPOOL:
            k, stride, pad = r.unpack("3I")
            layers.append(MaxPool(name, k, stride, pad))
        elif tag == TAG_LRN:
            k, alpha, beta = r.unpack("3f")
            (n,) = r.unpack("I")
            layers.append(LRN(name, k, alpha, beta, n))
        elif tag == TAG_FC:
            out, inp = r.unpack("2I")
            weights = r.floats(out * inp).reshape(out, inp)
            layers.append(FullyConnected(name, weights, r.floats(out)))
        else:
            raise WeightFormatError(f"unknown layer tag {tag}")
    if r.pos != len(payload):
        raise WeightFormatError(f"{len(payload) - r.pos} trailing bytes after last layer")
    try:
        return NetworkSpec((c, h, w), tuple(means), tuple(layers))
    except WeightFormatError:
        raise
    except NetworkError as e:
        raise WeightFormatError(f"dim mismatch: {e}") from None


def serialize_weights(net: NetworkSpec) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<3I", *net.input_dims),
             struct.pack("<3f", *net.channel_means), struct.pack("<I", len(net.layers))]
    for layer in net.layers:
        name = layer.name.encode("utf-8")

        def head(tag):
            parts.append(struct.pack("<BH", tag, len(name)) + name)

        if isinstance(layer, Conv):
            head(TAG_CONV)
            o, i, kh, kw = layer.weights.shape
            parts.append(struct.pack("<6I", o, i, kh, kw, layer.stride, layer.pad))
            parts.append(layer.weights.astype("<f4").tobytes() + layer.bias.astype("<f4").tobytes())
        elif isinstance(layer, ReLU):
            head(TAG_RELU)
        elif isinstance(layer, MaxPool):
            head(TAG_MAXPOOL)
            parts.append(struct.pack("<3I", layer.k, layer.stride, layer.pad))
        elif isinstance(layer, LRN):
            head(TAG_LRN)
            parts.append(struct.pack("<3fI", layer.k, layer.alpha, layer.beta, layer.n))
        elif isinstance(layer, FullyConnected):
            head(TAG_FC)
            parts.append(struct.pack("<2I", *layer.weights.shape))
            parts.append(layer.weights.astype("<f4").tobytes() + layer.bias.astype("<f4").tobytes())
    return b"".join(parts)


def load_weights(path) -> NetworkSpec:
    return parse_weights(Path(path).read_bytes())


def random_network(rng: np.random.Generator, input_dims=(3, 16, 16), layers=None, scale=0.1) -> NetworkSpec:
    """Small random network, mainly for tests and smoke runs.

    ``layers`` is a list of tuples such as ``("conv", out, k, stride, pad)``,
    ``("relu",)``, ``("pool", k, stride, pad)``, ``("lrn", k, alpha, beta, n)``
    or ``("fc", out)``.
    """
    if layers is None:
        layers = [("conv", 8, 3, 1, 1), ("relu",), ("pool", 2, 2, 0), ("fc", 16)]
    dims = tuple(input_dims)
    built: list[Layer] = []
    for i, spec in enumerate(layers):
        kind = spec[0]
        name = f"{kind}{i + 1}"
        if kind == "conv":
            _, out, k, stride, pad = spec
            wts = (rng.standard_normal((out, dims[0], k, k)) * scale).astype(np.float32)
            built.append(Conv(name, wts, (rng.standard_normal(out) * scale).astype(np.float32), stride, pad))
        elif kind == "relu":
            built.append(ReLU(name))
        elif kind == "pool":
            built.append(MaxPool(name, *spec[1:]))
        elif kind == "lrn":
            built.append(LRN(name, *spec[1:]))
        elif kind == "fc":
            n_in = int(np.prod(dims))
            wts = (rng.standard_normal((spec[1], n_in)) * scale / np.sqrt(n_in)).astype(np.float32)
            built.append(FullyConnected(name, wts, (rng.standard_normal(spec[1]) * scale).astype(np.float32)))
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
        dims = infer_shapes(NetworkSpec(tuple(input_dims), (0.0, 0.0, 0.0), tuple(built)))[-1]
    return NetworkSpec(tuple(input_dims), (0.0, 0.0, 0.0), tuple(built))
