"""Dataset readers, image-grid writer, model files and CSV outputs."""

from __future__ import annotations

import csv
import gzip
import os
import re
import struct
from dataclasses import dataclass

import numpy as np

from .conv_layer import ConvSpec, ConvUnpoolLayer
from .errors import BadMagic, FormatError, ShapeMismatch, TruncatedFile, VersionMismatch
from .ff_layer import FeedforwardLayer
from .trainer import Model

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32

MODEL_MAGIC = b"STAR"
MODEL_VERSION = 1
TAG_FF = 1
TAG_CONV = 2


@dataclass
class ImageBatch:
    """``pixels`` is ``(N, C, H, W)`` float64 in [0, 1]."""

    pixels: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 4:
            raise ShapeMismatch(f"pixels must be (N, C, H, W), got {self.pixels.shape}")

    @property
    def n(self):
        return self.pixels.shape[0]

    @property
    def image_shape(self):
        return self.pixels.shape[1:]

    def subset(self, count):
        labels = None if self.labels is None else self.labels[:count]
        return ImageBatch(self.pixels[:count], labels)


def _open(path):
    path = str(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def read_idx(path):
    """Raw IDX tensor of unsigned bytes (big-endian header)."""
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4:
        raise TruncatedFile(f"{path}: {len(raw)} bytes, too short for an IDX header")
    zero, dtype, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype != 0x08 or ndim < 1:
        raise BadMagic(f"{path}: magic 0x{int.from_bytes(raw[:4], 'big'):08x} is not an unsigned-byte IDX file")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFile(f"{path}: header needs {header} bytes, file has {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise TruncatedFile(f"{path}: expected {size} data bytes, found {len(raw) - header}")
    if len(raw) - header > size:
        raise FormatError(f"{path}: {len(raw) - header - size} trailing bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def write_idx(path, array):
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ValueError("IDX writer only handles uint8 data")
    head = struct.pack(">HBB", 0, 0x08, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(head + array.tobytes())


def load_idx(path):
    """IDX image file (magic 0x00000803) as an ``N x 1 x H x W`` batch in [0, 1]."""
    data = read_idx(path)
    if data.ndim != 3:
        raise BadMagic(f"{path}: expected a 3-D image tensor (magic 0x{IDX_IMAGES:08x}), got {data.ndim}-D")
    return ImageBatch(data[:, None, :, :].astype(np.float64) / 255.0)


def load_idx_labels(path):
    data = read_idx(path)
    if data.ndim != 1:
        raise BadMagic(f"{path}: expected a label vector (magic 0x{IDX_LABELS:08x}), got {data.ndim}-D")
    return data.astype(np.int64)


def idx_header(path):
    """``(N, image_shape)`` from an IDX header without reading pixel data."""
    with _open(path) as f:
        head = f.read(4)
        if len(head) < 4:
            raise TruncatedFile(f"{path}: too short for an IDX header")
        zero, dtype, ndim = struct.unpack(">HBB", head)
        if zero != 0 or dtype != 0x08 or ndim != 3:
            raise BadMagic(f"{path}: not an IDX image file")
        dims = f.read(4 * ndim)
        if len(dims) < 4 * ndim:
            raise TruncatedFile(f"{path}: truncated IDX header")
    n, h, w = struct.unpack(">3I", dims)
    return n, (1, h, w)


def load_cifar10(path):
    """CIFAR-10 binary batch: 3073-byte records of label + 3x32x32 channel-major pixels."""
    with _open(path) as f:
        raw = f.read()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise TruncatedFile(f"{path}: {len(raw)} bytes is not a whole number of {CIFAR_RECORD}-byte records")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    pixels = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return ImageBatch(pixels, labels)


def cifar10_header(path):
    size = os.path.getsize(path)
    if size == 0 or size % CIFAR_RECORD:
        raise TruncatedFile(f"{path}: {size} bytes is not a whole number of {CIFAR_RECORD}-byte records")
    return size // CIFAR_RECORD, (3, 32, 32)


def flatten(batch):
    """``N x (C*H*W)`` matrix, channel-major then row-major."""
    pixels = batch.pixels if isinstance(batch, ImageBatch) else np.asarray(batch, dtype=np.float64)
    return pixels.reshape(pixels.shape[0], -1)


def unflatten(matrix, shape):
    matrix = np.asarray(matrix, dtype=np.float64)
    c, h, w = shape
    if matrix.ndim != 2 or matrix.shape[1] != c * h * w:
        raise ShapeMismatch(f"cannot unflatten {matrix.shape} into images of shape {shape}")
    return ImageBatch(matrix.reshape(matrix.shape[0], c, h, w))


def write_image_grid(batch, cols, path):
    """Tile images into one binary PGM (1 channel) or PPM (3 channels).

    Image ``n`` goes to grid cell ``(n // cols, n % cols)``. Pixels are clamped
    to [0, 1] and scaled to 0..255; the number of clamped values is returned.
    """
    pixels = batch.pixels if isinstance(batch, ImageBatch) else np.asarray(batch, dtype=np.float64)
    if pixels.ndim != 4:
        raise ShapeMismatch(f"expected (N, C, H, W) images, got {pixels.shape}")
    n, c, h, w = pixels.shape
    if c not in (1, 3):
        raise ShapeMismatch(f"only 1- or 3-channel images can be written, got {c}")
    if n == 0 or cols < 1:
        raise ValueError("need at least one image and one column")
    cols = min(cols, n)
    rows = -(-n // cols)
    clamped = int(np.count_nonzero((pixels < 0.0) | (pixels > 1.0)))
    grid = np.zeros((c, rows * h, cols * w))
    for i in range(n):
        r, col = divmod(i, cols)
        grid[:, r * h:(r + 1) * h, col * w:(col + 1) * w] = pixels[i]
    img = np.rint(np.clip(grid, 0.0, 1.0) * 255.0).astype(np.uint8)
    if c == 1:
        header, body = b"P5", img[0].tobytes()
    else:
        header, body = b"P6", img.transpose(1, 2, 0).tobytes()
    try:
        with open(path, "wb") as f:
            f.write(header + b"\n%d %d\n255\n" % (cols * w, rows * h) + body)
    except OSError as exc:
        raise OSError(f"cannot write image grid to {path}: {exc}") from exc
    return clamped


def read_pnm(path):
    """Read a binary PGM/PPM written by :func:`write_image_grid` as ``(C, H, W)`` uint8."""
    with open(path, "rb") as f:
        raw = f.read()
    m = re.match(rb"(P[56])\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None or int(m.group(4)) != 255:
        raise BadMagic(f"{path}: unsupported PNM header")
    w, h = int(m.group(2)), int(m.group(3))
    c = 1 if m.group(1) == b"P5" else 3
    body = raw[m.end():]
    data = np.frombuffer(body, dtype=np.uint8)
    if data.size != c * h * w:
        raise TruncatedFile(f"{path}: expected {c * h * w} pixels, found {data.size}")
    return data.reshape(h, w, c).transpose(2, 0, 1)


def _pack_f64(a):
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def model_bytes(model):
    out = [MODEL_MAGIC, struct.pack("<Id", MODEL_VERSION, model.slope), struct.pack("<I", len(model.layers))]
    for layer in model.layers:
        if isinstance(layer, ConvUnpoolLayer):
            s = layer.spec
            out.append(struct.pack("<B6I", TAG_CONV, s.in_channels, s.in_height, s.in_width,
                                   s.kernel_size, s.pre_shuffle_channels, s.unpool))
            out.append(_pack_f64(layer.kernels))
        else:
            out.append(struct.pack("<B2I", TAG_FF, layer.in_dim, layer.out_dim))
            out.append(_pack_f64(layer.weights))
    return b"".join(out)


def save_model(model, path):
    with open(path, "wb") as f:
        f.write(model_bytes(model))


class _Reader:
    def __init__(self, raw, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise TruncatedFile(f"{self.path}: unexpected end of model file at byte {self.pos}")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, rows, cols):
        return np.frombuffer(self.take(8 * rows * cols), dtype="<f8").astype(np.float64).reshape(rows, cols)


def parse_model(raw, path="<bytes>"):
    r = _Reader(raw, path)
    if r.take(4) != MODEL_MAGIC:
        raise BadMagic(f"{path}: not a starnet model file")
    (version,) = r.unpack("<I")
    if version != MODEL_VERSION:
        raise VersionMismatch(f"{path}: model format version {version}, this build reads {MODEL_VERSION}")
    (slope,) = r.unpack("<d")
    (count,) = r.unpack("<I")
    layers = []
    for _ in range(count):
        (tag,) = r.unpack("<B")
        if tag == TAG_FF:
            d_in, d_out = r.unpack("<2I")
            layers.append(FeedforwardLayer(r.floats(d_out, d_in + 1)))
        elif tag == TAG_CONV:
            spec = ConvSpec(*r.unpack("<6I"))
            layers.append(ConvUnpoolLayer(spec, r.floats(spec.pre_shuffle_channels, spec.kernel_params)))
        else:
            raise FormatError(f"{path}: unknown layer tag {tag}")
    if r.pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - r.pos} trailing bytes after the last layer")
    return Model(slope, layers)


def load_model(path):
    with open(path, "rb") as f:
        return parse_model(f.read(), str(path))


METRIC_FIELDS = ["epoch", "layer", "phase", "linear_residual", "elastic_loss"]


def write_metrics_csv(history, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRIC_FIELDS)
        for r in history.records:
            w.writerow([r.epoch, r.layer, r.phase, repr(r.linear_residual), repr(r.elastic_loss)])


def write_latents_csv(latents, path):
    latents = np.asarray(latents, dtype=np.float64)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["index"] + [f"z{j}" for j in range(latents.shape[1])])
        for i, row in enumerate(latents):
            w.writerow([i] + [repr(float(v)) for v in row])


def read_latents_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0][0] != "index":
        raise FormatError(f"{path}: missing latent CSV header")
    width = len(rows[0]) - 1
    return np.array([[float(v) for v in row[1:]] for row in rows[1:]], dtype=np.float64).reshape(-1, width)
