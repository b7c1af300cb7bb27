"""Datasets, splits, label noise and batch sampling."""

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


class IdxMagicError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    noise_mask: Optional[np.ndarray] = None
    index: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise ValueError(f"features {x.shape} and labels {y.shape} do not line up")
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self.noise_mask is not None and np.shape(self.noise_mask) != y.shape:
            raise ValueError("noise_mask length must match the number of samples")
        idx = np.arange(y.shape[0]) if self.index is None else np.asarray(self.index, dtype=np.int64)
        for name, arr in (("features", x), ("labels", y), ("index", idx)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.noise_mask is not None:
            mask = np.asarray(self.noise_mask, dtype=bool)
            mask.setflags(write=False)
            object.__setattr__(self, "noise_mask", mask)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        mask = None if self.noise_mask is None else self.noise_mask[idx]
        return LabeledDataset(self.features[idx], self.labels[idx], self.num_classes, mask, self.index[idx])


@dataclass(frozen=True)
class SplitSet:
    train: LabeledDataset
    val: LabeledDataset
    hyper_val: LabeledDataset
    test: Optional[LabeledDataset]
    seed: int

    def training_view(self):
        """The splits a trainer may read; the test split is deliberately absent."""
        return TrainingView(self.train, self.val, self.hyper_val)


@dataclass(frozen=True)
class TrainingView:
    train: LabeledDataset
    val: LabeledDataset
    hyper_val: LabeledDataset


# --------------------------------------------------------------------------- generation

def gen_blobs(seed, n, C, d, spread, center_scale=1.0):
    """Gaussian class clusters with near-balanced classes.

    Centers are drawn with i.i.d. ``N(0, center_scale^2)`` coordinates; each
    sample is its class center plus isotropic noise of std ``spread``.
    """
    if not (n >= C >= 2) or d < 1 or not spread > 0:
        raise ValueError(f"invalid blob sizes n={n}, C={C}, d={d}, spread={spread}")
    rng = np.random.default_rng(seed)
    centers = rng.normal(scale=center_scale, size=(C, d))
    labels = rng.permutation(np.arange(n) % C)
    x = centers[labels] + rng.normal(scale=spread, size=(n, d))
    return LabeledDataset(x, labels, C)


def inject_label_noise(ds, fraction, seed):
    """Redraw the labels of exactly ``round(fraction * n)`` samples uniformly over all classes.

    A redrawn label may coincide with the original one.
    """
    if not (0.0 <= fraction <= 1.0):
        raise ValueError(f"noise fraction must lie in [0, 1], got {fraction}")
    n = len(ds)
    m = int(round(fraction * n))
    rng = np.random.default_rng(seed)
    picked = rng.choice(n, size=m, replace=False)
    labels = ds.labels.copy()
    labels[picked] = rng.integers(0, ds.num_classes, size=m)
    mask = np.zeros(n, dtype=bool)
    mask[picked] = True
    if ds.noise_mask is not None:
        mask |= ds.noise_mask
    return LabeledDataset(ds.features, labels, ds.num_classes, mask, ds.index)


def split_90_5_5(ds, seed, test=None):
    """Random 90/5/5 train/val/hyper-val partition; rounding remainder goes to train."""
    n = len(ds)
    if n < 20:
        raise ValueError(f"need at least 20 samples to split, got {n}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    k = n * 5 // 100
    val, hyper = perm[:k], perm[k:2 * k]
    train = perm[2 * k:]
    return SplitSet(ds.subset(np.sort(train)), ds.subset(np.sort(val)), ds.subset(np.sort(hyper)), test, seed)


def carve_clean(ds, fraction, seed):
    """Split off a ``fraction`` of ``ds`` as a held-out clean subset: ``(clean, rest)``."""
    n = len(ds)
    k = max(1, int(math.floor(fraction * n)))
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    return ds.subset(np.sort(perm[:k])), ds.subset(np.sort(perm[k:]))


# --------------------------------------------------------------------------- sampling

class BatchSampler:
    """Index batches of size ``b`` from a dataset of ``n`` samples.

    Without replacement every index appears once per epoch and a short final
    batch is dropped.  With replacement batches are i.i.d. uniform draws.
    """

    def __init__(self, n, b, rng, replace=False):
        if b < 1:
            raise ValueError(f"batch size must be >= 1, got {b}")
        if not replace and b > n:
            raise ValueError(f"batch size {b} exceeds dataset size {n}")
        self.n = n
        self.b = b
        self.rng = rng
        self.replace = replace
        self.epoch = 0
        self._order = None
        self._pos = 0

    @property
    def batches_per_epoch(self):
        return self.n // self.b

    def next(self):
        if self.replace:
            return self.rng.integers(0, self.n, size=self.b)
        if self._order is None or self._pos + self.b > self.n:
            if self._order is not None:
                self.epoch += 1
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        out = self._order[self._pos:self._pos + self.b]
        self._pos += self.b
        return out

    __next__ = next

    def __iter__(self):
        return self


# --------------------------------------------------------------------------- IDX files

def _read_exact(f, nbytes, what):
    buf = f.read(nbytes)
    if len(buf) != nbytes:
        raise IdxTruncatedError(f"{what}: expected {nbytes} bytes, got {len(buf)}")
    return buf


def _read_idx(path, magic, ndim, what):
    with open(path, "rb") as f:
        head = _read_exact(f, 4, f"{what} magic")
        (got,) = struct.unpack(">I", head)
        if got != magic:
            raise IdxMagicError(f"{what}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
        dims = struct.unpack(">" + "I" * ndim, _read_exact(f, 4 * ndim, f"{what} header"))
        count = int(np.prod(dims))
        payload = _read_exact(f, count, f"{what} payload")
    return dims, np.frombuffer(payload, dtype=np.uint8)


def load_idx(path_images, path_labels, num_classes=None):
    """Read an IDX image/label pair; pixels are scaled to [0, 1] by 1/255."""
    (count, rows, cols), pixels = _read_idx(path_images, IDX_IMAGE_MAGIC, 3, "images")
    (n_labels,), labels = _read_idx(path_labels, IDX_LABEL_MAGIC, 1, "labels")
    if count != n_labels:
        raise IdxCountMismatchError(f"image count {count} != label count {n_labels}")
    features = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    if num_classes is None:
        num_classes = max(2, int(labels.max()) + 1 if labels.size else 2)
    return LabeledDataset(features, labels, num_classes)


def write_idx(path_images, path_labels, images, labels):
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError(f"images must be count x rows x cols, got {images.shape}")
    with open(path_images, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, *images.shape))
        f.write(images.tobytes())
    with open(path_labels, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


# --------------------------------------------------------------------------- text format

def write_text(path, ds):
    """Header ``d,C`` then one ``f_1,...,f_d,label`` row per sample."""
    with open(path, "w") as f:
        f.write(f"{ds.dim},{ds.num_classes}\n")
        for row, y in zip(ds.features, ds.labels):
            f.write(",".join(repr(float(v)) for v in row) + f",{int(y)}\n")


def read_text(path):
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty file")
    try:
        d, C = (int(t) for t in lines[0].split(","))
    except ValueError:
        raise ValueError(f"{path}: header must be 'd,C', got {lines[0]!r}") from None
    rows = [ln.split(",") for ln in lines[1:] if ln.strip()]
    for i, r in enumerate(rows, start=2):
        if len(r) != d + 1:
            raise ValueError(f"{path}:{i}: expected {d + 1} fields, got {len(r)}")
    x = np.array([[float(t) for t in r[:d]] for r in rows], dtype=np.float64).reshape(len(rows), d)
    y = np.array([int(r[d]) for r in rows], dtype=np.int64)
    return LabeledDataset(x, y, C)
