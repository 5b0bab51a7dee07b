"""Random-convolution (extreme learning machine) embedding and the MLRF
binary container for precomputed features and trained weights.

MLRF layout, little-endian::

    b"MLRF"  u32 version=1  u32 nFeatures  u32 nExamples  u8 biasIncluded
    f64[nFeatures * nExamples]   column-major (one example after another)
    u32[nExamples]               labels
    u32                          nClasses
    [u32 role]                   optional; 0 = dataset, 1 = weights

Weight files store ``W^T`` (n_f x n_c) as the matrix, class indices as
labels, and always carry the role tag.
"""

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, FormatError
from .model import Dataset

MAGIC = b"MLRF"
VERSION = 1
ROLE_DATASET = 0
ROLE_WEIGHTS = 1
_HEADER = struct.Struct("<4sIIIB")


@dataclass(frozen=True)
class ElmEmbedding:
    filters: np.ndarray      # (n_filters, 3, 3)
    seed: int
    input_height: int
    input_width: int

    @property
    def n_filters(self):
        return self.filters.shape[0]

    @property
    def output_dim(self):
        return self.n_filters * self.input_height * self.input_width + 1


def elm_build(seed, input_height=28, input_width=28, n_filters=9):
    """Draw ``n_filters`` 3x3 kernels i.i.d. standard normal from ``seed``."""
    if input_height < 3 or input_width < 3:
        raise ValueError("images must be at least 3x3")
    rng = np.random.default_rng(seed)
    filters = rng.standard_normal((n_filters, 3, 3))
    filters.setflags(write=False)
    return ElmEmbedding(filters, int(seed), int(input_height), int(input_width))


def periodic_convolve(images, kernel):
    """2-D convolution with wrap-around on both axes for a batch (B, H, W).

    ``out[i, j] = sum_{a, b} kernel[a, b] * x[(i - a + 1) % H, (j - b + 1) % W]``
    """
    out = np.zeros(images.shape, dtype=np.float64)
    for a in range(3):
        for b in range(3):
            if kernel[a, b] != 0:
                out += kernel[a, b] * np.roll(images, shift=(a - 1, b - 1), axis=(1, 2))
    return out


def elm_apply(emb, images, chunk=1024):
    """Embed a batch of images; returns an ``output_dim x B`` matrix.

    Each image is convolved with every filter, passed through ``tanh``,
    flattened row-major, the blocks stacked filter by filter and a constant 1
    appended. ``uint8`` input is scaled to [0, 1] first.
    """
    images = np.asarray(images)
    if images.ndim == 2:
        images = images[None]
    if images.shape[1:] != (emb.input_height, emb.input_width):
        raise DimensionMismatch(
            f"images are {images.shape[1:]}, embedding expects "
            f"({emb.input_height}, {emb.input_width})")
    scale = 255.0 if images.dtype == np.uint8 else 1.0
    B = images.shape[0]
    block = emb.input_height * emb.input_width
    out = np.empty((emb.output_dim, B))
    out[-1] = 1.0
    for lo in range(0, B, chunk):
        x = images[lo:lo + chunk].astype(np.float64) / scale
        for k in range(emb.n_filters):
            conv = periodic_convolve(x, emb.filters[k])
            out[k * block:(k + 1) * block, lo:lo + x.shape[0]] = np.tanh(conv).reshape(x.shape[0], -1).T
    return out


# -- MLRF container ----------------------------------------------------------

def _read_file(path):
    # bytearray keeps the arrays viewed from it writable without a second copy
    buf = bytearray(os.path.getsize(path))
    with open(path, "rb") as fh:
        fh.readinto(buf)
    return buf


def _write_container(fh, M, labels, n_classes, bias, role=None):
    n_f, n = M.shape
    fh.write(_HEADER.pack(MAGIC, VERSION, n_f, n, 1 if bias else 0))
    fh.write(np.asarray(M, dtype="<f8").tobytes(order="F"))
    fh.write(np.asarray(labels, dtype="<u4").tobytes())
    fh.write(struct.pack("<I", n_classes))
    if role is not None:
        fh.write(struct.pack("<I", role))


def _read_container(buf):
    if len(buf) < _HEADER.size:
        raise FormatError(f"file too short for MLRF header ({len(buf)} bytes)", offset=len(buf))
    magic, version, n_f, n, bias = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported MLRF version {version}", offset=4)
    if bias not in (0, 1):
        raise FormatError(f"bias flag must be 0 or 1, got {bias}", offset=16)
    off = _HEADER.size
    nbytes = 8 * n_f * n
    if len(buf) < off + nbytes:
        raise FormatError(f"feature payload truncated: need {nbytes} bytes", offset=len(buf))
    M = np.frombuffer(buf, dtype="<f8", count=n_f * n, offset=off).reshape(n, n_f).T
    off += nbytes
    if len(buf) < off + 4 * n + 4:
        raise FormatError("label block truncated", offset=len(buf))
    labels = np.frombuffer(buf, dtype="<u4", count=n, offset=off).astype(np.int64)
    off += 4 * n
    (n_classes,) = struct.unpack_from("<I", buf, off)
    off += 4
    role = None
    if len(buf) == off + 4:
        (role,) = struct.unpack_from("<I", buf, off)
        off += 4
    if len(buf) != off:
        raise FormatError(f"{len(buf) - off} unexpected trailing bytes", offset=off)
    return dict(matrix=M, labels=labels, n_classes=n_classes, bias=bool(bias), role=role,
                n_features=n_f, n_examples=n)


def read_header(path):
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise FormatError("file too short for MLRF header", offset=len(head))
    magic, version, n_f, n, bias = _HEADER.unpack(head)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    return dict(version=version, n_features=n_f, n_examples=n, bias=bool(bias))


def write_features(path, data: Dataset):
    with open(path, "wb") as fh:
        _write_container(fh, data.D, data.labels, data.n_classes, data.bias_appended)


def load_precomputed_features(path, expected_dim=None, append_bias=True):
    """Read an MLRF dataset file.

    ``expected_dim`` is checked against the feature count stored in the
    file. A bias row is appended when the file says it is absent (unless
    ``append_bias`` is False).
    """
    from .data import one_hot

    buf = _read_file(path)
    rec = _read_container(buf)
    if rec["role"] not in (None, ROLE_DATASET):
        raise FormatError(f"file holds role {rec['role']}, not a dataset", offset=len(buf) - 4)
    if expected_dim is not None and rec["n_features"] != expected_dim:
        raise DimensionMismatch(
            f"{path}: file has {rec['n_features']} features, expected {expected_dim}")
    D = rec["matrix"]
    bias = rec["bias"]
    if not bias and append_bias:
        D = np.vstack([D, np.ones((1, D.shape[1]))])
        bias = True
    C = one_hot(rec["labels"], rec["n_classes"])
    return Dataset(D, C, rec["labels"], bias_appended=bias)


def write_weights(path, W, bias_included=True):
    W = np.asarray(W, dtype=np.float64)
    n_c = W.shape[0]
    with open(path, "wb") as fh:
        _write_container(fh, W.T, np.arange(n_c), n_c, bias_included, role=ROLE_WEIGHTS)


def read_weights(path):
    rec = _read_container(_read_file(path))
    if rec["role"] != ROLE_WEIGHTS:
        raise FormatError(f"{path} is not a weights file (role {rec['role']})", offset=_HEADER.size)
    return np.array(rec["matrix"].T)
