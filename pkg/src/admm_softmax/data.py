"""Dataset acquisition: IDX (MNIST) parsing, CSV ingestion, one-hot labels
and seeded train/validation/test splits."""

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CountMismatch, FormatError, InsufficientExamples, LabelOutOfRange
from .model import Dataset

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class RawImageSet:
    pixels: np.ndarray   # (N, H, W) uint8
    labels: np.ndarray   # (N,) uint8

    @property
    def count(self):
        return self.pixels.shape[0]

    @property
    def height(self):
        return self.pixels.shape[1]

    @property
    def width(self):
        return self.pixels.shape[2]

    def subset(self, index):
        return RawImageSet(self.pixels[index], self.labels[index])


def _read_idx(path, magic, ndim):
    with open(path, "rb") as fh:
        buf = fh.read()
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise FormatError(f"{path}: truncated IDX header", offset=len(buf))
    (got,) = struct.unpack_from(">I", buf, 0)
    if got != magic:
        raise FormatError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}", offset=0)
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    size = int(np.prod(dims))
    if len(buf) < header + size:
        raise FormatError(f"{path}: payload truncated, need {size} bytes after header",
                          offset=len(buf))
    if len(buf) > header + size:
        raise FormatError(f"{path}: {len(buf) - header - size} trailing bytes",
                          offset=header + size)
    return np.frombuffer(buf, dtype=np.uint8, offset=header).reshape(dims)


def parse_idx(images_path, labels_path):
    """Read an IDX image file (magic 0x803) and its label file (magic 0x801)."""
    pixels = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if pixels.shape[0] != labels.shape[0]:
        raise CountMismatch(
            f"{images_path} holds {pixels.shape[0]} images but {labels_path} "
            f"holds {labels.shape[0]} labels")
    return RawImageSet(pixels, labels)


def write_idx(images_path, labels_path, raw):
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *raw.pixels.shape))
        fh.write(np.ascontiguousarray(raw.pixels, dtype=np.uint8).tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, raw.labels.shape[0]))
        fh.write(np.asarray(raw.labels, dtype=np.uint8).tobytes())


def one_hot(labels, n_classes):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        bad = labels[(labels < 0) | (labels >= n_classes)][0]
        raise LabelOutOfRange(f"label {bad} outside [0, {n_classes})")
    C = np.zeros((n_classes, labels.size))
    C[labels, np.arange(labels.size)] = 1.0
    return C


@dataclass
class SplitSpec:
    train_count: int
    val_count: int
    test_count: int
    seed: int = 0
    sequential: bool = False


def split_indices(n_available, spec):
    need = spec.train_count + spec.val_count + spec.test_count
    if min(spec.train_count, spec.val_count, spec.test_count) < 0:
        raise ValueError("split counts must be nonnegative")
    if need > n_available:
        raise InsufficientExamples(f"split needs {need} examples, only {n_available} available")
    if spec.sequential:
        order = np.arange(n_available)
    else:
        order = np.random.default_rng(spec.seed).permutation(n_available)
    a = spec.train_count
    b = a + spec.val_count
    return order[:a], order[a:b], order[b:need]


def split(data, spec):
    """Partition ``data`` into disjoint train / validation / test subsets."""
    return tuple(data.subset(i) for i in split_indices(data.n_examples, spec))


def images_to_dataset(raw, n_classes=10, embedding=None):
    """Turn raw images into a Dataset, through the ELM embedding if given,
    otherwise as [0, 1]-scaled pixels with a bias row."""
    from .features import elm_apply

    if embedding is not None:
        D = elm_apply(embedding, raw.pixels)
    else:
        D = np.empty((raw.height * raw.width + 1, raw.count))
        D[:-1] = raw.pixels.reshape(raw.count, -1).T / 255.0
        D[-1] = 1.0
    labels = raw.labels.astype(np.int64)
    return Dataset(D, one_hot(labels, n_classes), labels, bias_appended=True)


def load_csv(path, label_column=-1, header=False, append_bias=True, n_classes=None):
    """Read a numeric CSV with one example per row.

    ``label_column`` is a column index, or a column name when ``header`` is
    set. Labels must be integers.
    """
    rows, labels = [], []
    width = None
    label_idx = None
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if header and lineno == 1:
                if isinstance(label_column, str):
                    if label_column not in row:
                        raise FormatError(f"{path}: no column named {label_column!r}", line=1)
                    label_idx = row.index(label_column)
                width = len(row)
                continue
            if not row or all(not cell.strip() for cell in row):
                continue
            if width is None:
                width = len(row)
            if len(row) != width:
                raise FormatError(f"{path}: expected {width} fields, found {len(row)}",
                                  line=lineno)
            if label_idx is None:
                if isinstance(label_column, str):
                    raise FormatError(f"{path}: named label column needs a header row", line=lineno)
                label_idx = label_column % width
            try:
                values = [float(cell) for cell in row]
            except ValueError as exc:
                raise FormatError(f"{path}: non-numeric field ({exc})", line=lineno) from None
            lab = values.pop(label_idx)
            if lab != int(lab):
                raise FormatError(f"{path}: label {lab} is not an integer", line=lineno)
            labels.append(int(lab))
            rows.append(values)
    if not rows:
        raise FormatError(f"{path}: no data rows", line=1)
    X = np.array(rows, dtype=np.float64).T
    labels = np.array(labels, dtype=np.int64)
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    if append_bias:
        X = np.vstack([X, np.ones((1, X.shape[1]))])
    return Dataset(X, one_hot(labels, n_classes), labels, bias_appended=append_bias)


def write_csv(path, data, header=False):
    """Write features (without a bias row) followed by the label column."""
    D = data.D[:-1] if data.bias_appended else data.D
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header:
            w.writerow([f"f{i}" for i in range(D.shape[0])] + ["label"])
        for j in range(data.n_examples):
            w.writerow([repr(float(v)) for v in D[:, j]] + [int(data.labels[j])])
