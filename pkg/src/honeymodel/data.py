"""Datasets: MNIST IDX ingestion, synthetic blobs and stratified splits."""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, InputError, ShapeError
from .seeds import rng as make_rng

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049


@dataclass(frozen=True)
class LabeledDataset:
    samples: np.ndarray
    labels: np.ndarray
    num_classes: int
    poisoned: np.ndarray = field(default=None)
    indices: np.ndarray = field(default=None)

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2:
            raise ShapeError(f"samples must be N x D, got shape {x.shape}")
        if y.shape != (len(x),):
            raise ShapeError(f"{len(x)} samples but labels have shape {y.shape}")
        if len(x) and (x.min() < 0.0 or x.max() > 1.0 or not np.isfinite(x).all()):
            raise InputError("feature values must lie in [0, 1]")
        if len(y) and (y.min() < 0 or y.max() >= self.num_classes):
            raise InputError(f"labels must lie in [0, {self.num_classes})")
        mask = np.zeros(len(x), bool) if self.poisoned is None else np.asarray(self.poisoned, bool)
        if mask.shape != (len(x),):
            raise ShapeError("poisoned mask length differs from sample count")
        idx = np.arange(len(x)) if self.indices is None else np.asarray(self.indices, np.int64)
        if idx.shape != (len(x),):
            raise ShapeError("index array length differs from sample count")
        for name, arr in (("samples", x), ("labels", y), ("poisoned", mask), ("indices", idx)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self):
        return self.samples.shape[1]

    def subset(self, which):
        which = np.asarray(which)
        return LabeledDataset(self.samples[which], self.labels[which], self.num_classes,
                              self.poisoned[which], self.indices[which])

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)


def _read_header(data, magic, n_dims, path):
    size = 4 * (1 + n_dims)
    if len(data) < size:
        raise FormatError("truncated IDX header", offset=len(data), path=path)
    values = struct.unpack_from(f">{1 + n_dims}I", data, 0)
    if values[0] != magic:
        raise FormatError(f"bad IDX magic {values[0]} (expected {magic})", offset=0, path=path)
    return values[1:], size


def read_idx_images(path):
    with open(path, "rb") as f:
        data = f.read()
    (count, rows, cols), off = _read_header(data, IMAGE_MAGIC, 3, path)
    need = off + count * rows * cols
    if len(data) < need:
        raise FormatError(f"truncated image data: need {need} bytes, have {len(data)}",
                          offset=len(data), path=path)
    if len(data) > need:
        raise FormatError("trailing bytes after image data", offset=need, path=path)
    return np.frombuffer(data, dtype=np.uint8, offset=off).reshape(count, rows * cols)


def read_idx_labels(path):
    with open(path, "rb") as f:
        data = f.read()
    (count,), off = _read_header(data, LABEL_MAGIC, 1, path)
    if len(data) < off + count:
        raise FormatError(f"truncated label data: need {off + count} bytes, have {len(data)}",
                          offset=len(data), path=path)
    if len(data) > off + count:
        raise FormatError("trailing bytes after label data", offset=off + count, path=path)
    return np.frombuffer(data, dtype=np.uint8, offset=off)


def load_idx(images_path, labels_path, num_classes=None):
    """Load an IDX image/label pair, scaling pixel bytes into [0, 1]."""
    pixels = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(pixels) != len(labels):
        raise FormatError(f"{len(pixels)} images but {len(labels)} labels", offset=4,
                          path=labels_path)
    if num_classes is None:
        num_classes = max(int(labels.max()) + 1 if len(labels) else 0, 2)
    return LabeledDataset(pixels / 255.0, labels, num_classes)


def write_idx(dataset, images_path, labels_path, rows=None, cols=None):
    """Write ``dataset`` as an IDX pair; features must be multiples of 1/255."""
    n, d = dataset.samples.shape
    if rows is None:
        rows, cols = 1, d
    if rows * cols != d:
        raise ShapeError(f"{rows}x{cols} does not cover {d} features")
    pixels = np.rint(dataset.samples * 255.0)
    if not np.allclose(pixels / 255.0, dataset.samples, rtol=0, atol=1e-12):
        raise InputError("features are not representable as bytes")
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols))
        f.write(pixels.astype(np.uint8).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def blob_centers(dims, class_count, separation, seed):
    if class_count <= 2 * dims:
        centers = np.full((class_count, dims), 0.5)
        for c in range(class_count):
            centers[c, c // 2] += (separation / 2) * (1 if c % 2 == 0 else -1)
        return centers
    directions = make_rng(seed, "centers").normal(size=(class_count, dims))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return 0.5 + (separation / 2) * directions


def synthetic_blobs(num_per_class, dims, class_count, separation, seed, spread=0.1):
    """Gaussian blobs around distinct centres, clipped to the unit cube.

    For ``class_count <= 2 * dims`` the centres sit at ``0.5 +/- separation/2``
    along successive axes, so the two classes sharing an axis are exactly
    ``separation`` apart.
    """
    if not separation > 0:
        raise InputError("separation must be positive")
    if dims < 1 or class_count < 1 or num_per_class < 1:
        raise InputError("dims, class_count and num_per_class must be >= 1")
    centers = blob_centers(dims, class_count, separation, seed)
    gen = make_rng(seed, "blobs")
    labels = np.repeat(np.arange(class_count), num_per_class)
    noise = gen.normal(scale=spread, size=(len(labels), dims))
    samples = np.clip(centers[labels] + noise, 0.0, 1.0)
    return LabeledDataset(samples, labels, max(class_count, 2))


def stratified_counts(counts, fraction, gen):
    """Split per-class ``counts`` so the total is ``round(fraction * N)``.

    Largest-remainder allocation keeps every class within one of its
    proportional share; remainder ties are ordered by ``gen``.
    """
    counts = np.asarray(counts)
    exact = counts * fraction
    take = np.floor(exact).astype(np.int64)
    total = int(np.floor(counts.sum() * fraction + 0.5))
    short = total - take.sum()
    if short > 0:
        tiebreak = gen.permutation(len(counts))
        order = sorted(range(len(counts)), key=lambda c: (-(exact[c] - take[c]), tiebreak[c]))
        for c in order[:short]:
            take[c] += 1
    return take


def shuffle_split(dataset, test_fraction, seed):
    """Stratified, seeded train/test partition."""
    if not 0.0 < test_fraction < 1.0:
        raise InputError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    gen = make_rng(seed, "split")
    n_test = stratified_counts(dataset.class_counts(), test_fraction, gen)
    test_idx, train_idx = [], []
    for c in range(dataset.num_classes):
        members = gen.permutation(np.flatnonzero(dataset.labels == c))
        test_idx.append(members[:n_test[c]])
        train_idx.append(members[n_test[c]:])
    test_idx = np.sort(np.concatenate(test_idx))
    train_idx = np.sort(np.concatenate(train_idx))
    return dataset.subset(train_idx), dataset.subset(test_idx)
