"""Dataset parsing, preprocessing, viewpoint splits, and the synthetic set.

Binary formats handled natively:

* IDX (big-endian): magic 0x00000803 for [n, 28, 28] image tensors,
  0x00000801 for [n] label vectors; optional .gz transparently.
* The stereo-pair matrix format (little-endian): magic 0x1E3D4C55 for byte
  matrices, 0x1E3D4C54 for int32 matrices; header is magic, ndim, then
  max(ndim, 3) extents; row-major payload.
* CIFAR-10 binary batches (label byte + 3072 pixel bytes per record) and
  the SVHN .mat containers (via scipy.io).
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
NORB_BYTE_MAGIC = 0x1E3D4C55
NORB_INT_MAGIC = 0x1E3D4C54

AZIMUTH_CODES = tuple(range(0, 36, 2))                       # 18 codes, degrees / 10
TRAIN_AZIMUTH_CODES = (30, 32, 34, 0, 2, 4)                  # 300..40 degrees
TRAIN_ELEVATIONS = (0, 1, 2)                                 # 30, 35, 40 degrees
ELEVATION_DEGREES = tuple(30 + 5 * i for i in range(9))

DATASET_CLASSES = {
    "mnist": 10, "fashionmnist": 10, "smallnorb": 5,
    "svhn": 10, "cifar10": 10, "synthetic": 3,
}


class BadMagic(ValueError):
    pass


class TruncatedFile(ValueError):
    def __init__(self, path, expected, actual):
        super().__init__(f"{path}: expected {expected} bytes, found {actual}")
        self.expected = expected
        self.actual = actual


class DimensionMismatch(ValueError):
    pass


class MissingCompanion(FileNotFoundError):
    pass


class MissingMeta(ValueError):
    pass


class DatasetMissing(FileNotFoundError):
    pass


@dataclass
class Sample:
    """One example: image [channels, H, W] in [0, 1], class label, and an
    optional viewpoint record (category/instance/elevation/azimuth/lighting)."""

    image: np.ndarray
    label: int
    meta: dict | None = None


@dataclass
class SplitSpec:
    """Which viewpoints belong to training vs evaluation."""

    mode: str = "standard"                      # standard | novel-azimuth | novel-elevation
    train_azimuths: tuple = TRAIN_AZIMUTH_CODES
    train_elevations: tuple = TRAIN_ELEVATIONS

    def __post_init__(self):
        if self.mode not in ("standard", "novel-azimuth", "novel-elevation"):
            raise ValueError(f"unknown split mode {self.mode!r}")

    def test_azimuths(self):
        return tuple(c for c in AZIMUTH_CODES if c not in self.train_azimuths)

    def test_elevations(self):
        return tuple(e for e in range(9) if e not in self.train_elevations)

    def in_train_viewpoints(self, meta):
        if self.mode == "novel-azimuth":
            return meta["azimuth"] in self.train_azimuths
        if self.mode == "novel-elevation":
            return meta["elevation"] in self.train_elevations
        return True


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

def _open_maybe_gz(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx_raw(path):
    """Raw IDX payload as a uint8 ndarray plus its magic."""
    with _open_maybe_gz(path) as fh:
        data = fh.read()
    if len(data) < 4:
        raise TruncatedFile(path, 4, len(data))
    (magic,) = struct.unpack(">I", data[0:4])
    if magic == IDX_IMAGE_MAGIC:
        ndim = 3
    elif magic == IDX_LABEL_MAGIC:
        ndim = 1
    else:
        raise BadMagic(f"{path}: magic 0x{magic:08x} is not an IDX image/label file")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise TruncatedFile(path, header, len(data))
    dims = struct.unpack(f">{ndim}I", data[4:header])
    expected = header + int(np.prod(dims))
    if len(data) < expected:
        raise TruncatedFile(path, expected, len(data))
    payload = np.frombuffer(data[header:expected], dtype=np.uint8)
    return payload.reshape(dims), magic


def write_idx(path, array, magic=None):
    """Serialize a uint8 array back to IDX bytes (inverse of read_idx_raw)."""
    array = np.asarray(array, dtype=np.uint8)
    if magic is None:
        magic = IDX_IMAGE_MAGIC if array.ndim == 3 else IDX_LABEL_MAGIC
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def load_idx(path):
    """IDX file as floats: images scaled to [0, 1], labels as int64."""
    raw, magic = read_idx_raw(path)
    if magic == IDX_IMAGE_MAGIC:
        return raw.astype(np.float32) / 255.0
    return raw.astype(np.int64)


# ---------------------------------------------------------------------------
# stereo-pair binary matrices
# ---------------------------------------------------------------------------

def read_norb_matrix(path):
    """One little-endian binary matrix (byte or int32 flavored)."""
    path = Path(path)
    if not path.exists():
        raise MissingCompanion(str(path))
    data = path.read_bytes()
    if len(data) < 8:
        raise TruncatedFile(path, 8, len(data))
    (magic,) = struct.unpack("<I", data[0:4])
    if magic == NORB_BYTE_MAGIC:
        dtype, itemsize = np.uint8, 1
    elif magic == NORB_INT_MAGIC:
        dtype, itemsize = np.dtype("<i4"), 4
    else:
        raise BadMagic(f"{path}: magic 0x{magic:08x} is not a binary matrix file")
    (ndim,) = struct.unpack("<I", data[4:8])
    nstored = max(ndim, 3)
    header = 8 + 4 * nstored
    if len(data) < header:
        raise TruncatedFile(path, header, len(data))
    extents = struct.unpack(f"<{nstored}I", data[8:header])
    dims = extents[:ndim]
    expected = header + int(np.prod(dims)) * itemsize
    if len(data) < expected:
        raise TruncatedFile(path, expected, len(data))
    payload = np.frombuffer(data[header:expected], dtype=dtype)
    return payload.reshape(dims)


def load_smallnorb(dat_path, cat_path, info_path):
    """Stereo samples with viewpoint metadata from the three companions.

    Returns a list of Samples with 2-channel [2, 96, 96] images and meta
    carrying (category, instance, elevation 0-8, azimuth even 0-34,
    lighting 0-5).
    """
    images = read_norb_matrix(dat_path)
    cats = read_norb_matrix(cat_path)
    info = read_norb_matrix(info_path)
    if images.ndim != 4 or images.shape[1] != 2:
        raise DimensionMismatch(f"{dat_path}: expected [n, 2, 96, 96], got {images.shape}")
    n = images.shape[0]
    if cats.shape[0] != n or info.shape[0] != n:
        raise DimensionMismatch(
            f"companion lengths disagree: images {n}, categories {cats.shape[0]}, "
            f"info {info.shape[0]}"
        )
    if info.ndim != 2 or info.shape[1] != 4:
        raise DimensionMismatch(f"{info_path}: expected [n, 4] info rows, got {info.shape}")
    samples = []
    for i in range(n):
        instance, elevation, azimuth, lighting = (int(x) for x in info[i])
        meta = {
            "category": int(cats[i]),
            "instance": instance,
            "elevation": elevation,
            "azimuth": azimuth,
            "lighting": lighting,
        }
        img = images[i].astype(np.float32) / 255.0
        samples.append(Sample(image=img, label=int(cats[i]), meta=meta))
    return samples


# ---------------------------------------------------------------------------
# CIFAR-10 / SVHN loaders
# ---------------------------------------------------------------------------

def load_cifar10_bin(paths):
    """CIFAR-10 binary batches: records of 1 label byte + 3072 pixel bytes."""
    samples = []
    for path in paths:
        path = Path(path)
        if not path.exists():
            raise DatasetMissing(str(path))
        data = path.read_bytes()
        record = 1 + 3072
        if len(data) % record:
            raise TruncatedFile(path, (len(data) // record + 1) * record, len(data))
        raw = np.frombuffer(data, dtype=np.uint8).reshape(-1, record)
        for row in raw:
            img = row[1:].reshape(3, 32, 32).astype(np.float32) / 255.0
            samples.append(Sample(image=img, label=int(row[0])))
    return samples


def load_svhn_mat(path):
    """SVHN cropped-digit .mat container; label 10 means digit 0."""
    path = Path(path)
    if not path.exists():
        raise DatasetMissing(str(path))
    from scipy.io import loadmat

    blob = loadmat(str(path))
    x = blob["X"]  # [32, 32, 3, n]
    y = blob["y"].reshape(-1).astype(int) % 10
    images = np.transpose(x, (3, 2, 0, 1)).astype(np.float32) / 255.0
    return [Sample(image=images[i], label=int(y[i])) for i in range(len(y))]


# ---------------------------------------------------------------------------
# viewpoint splits
# ---------------------------------------------------------------------------

def viewpoint_split(samples, spec: SplitSpec):
    """Split (train samples, test samples) by viewpoint.

    ``samples`` is a (train, test) pair of sample lists from the original
    dataset split. Novel modes keep only train-viewpoint samples for
    training and only held-out-viewpoint samples for testing; standard
    mode passes both lists through unchanged.
    """
    train_samples, test_samples = samples
    if spec.mode == "standard":
        return list(train_samples), list(test_samples)
    _require_meta(train_samples)
    _require_meta(test_samples)
    train = [s for s in train_samples if spec.in_train_viewpoints(s.meta)]
    test = [s for s in test_samples if not spec.in_train_viewpoints(s.meta)]
    return train, test


def familiar_test_subset(test_samples, spec: SplitSpec):
    """Original-test-split samples restricted to the training viewpoints."""
    if spec.mode == "standard":
        return list(test_samples)
    _require_meta(test_samples)
    return [s for s in test_samples if spec.in_train_viewpoints(s.meta)]


def _require_meta(samples):
    for s in samples:
        if s.meta is None or "azimuth" not in s.meta or "elevation" not in s.meta:
            raise MissingMeta("viewpoint split needs azimuth/elevation metadata")


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def bilinear_resize(image, out_h, out_w):
    """Channel-wise bilinear resample with half-pixel-centered sampling."""
    c, h, w = image.shape
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[None, :, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, None, :]
    tl = image[:, y0[:, None], x0[None, :]]
    tr = image[:, y0[:, None], x1[None, :]]
    bl = image[:, y1[:, None], x0[None, :]]
    br = image[:, y1[:, None], x1[None, :]]
    top = tl * (1 - wx) + tr * wx
    bottom = bl * (1 - wx) + br * wx
    return (top * (1 - wy) + bottom * wy).astype(image.dtype)


def standardize(image, stats):
    mean, std = stats
    return (image - mean[:, None, None]) / std[:, None, None]


def compute_norm_stats(samples, dataset):
    """Per-channel mean/std over a training split, after any resize the
    dataset pipeline applies before normalization."""
    acc = []
    for s in samples:
        img = s.image
        if dataset == "smallnorb":
            img = bilinear_resize(img, 48, 48)
        acc.append(img.reshape(img.shape[0], -1))
    flat = np.concatenate(acc, axis=1)
    mean = flat.mean(axis=1)
    std = flat.std(axis=1)
    std[std < 1e-6] = 1.0
    return mean.astype(np.float32), std.astype(np.float32)


def _random_crop(image, out, rng):
    c, h, w = image.shape
    dy = int(rng.integers(0, h - out + 1))
    dx = int(rng.integers(0, w - out + 1))
    return image[:, dy : dy + out, dx : dx + out]


def _center_crop(image, out):
    c, h, w = image.shape
    dy = (h - out) // 2
    dx = (w - out) // 2
    return image[:, dy : dy + out, dx : dx + out]


def _pad(image, pixels):
    return np.pad(image, ((0, 0), (pixels, pixels), (pixels, pixels)))


def preprocess(sample, dataset, phase, rng, stats=None, augment_fashion=False):
    """One sample to a normalized [C, 32, 32] network input.

    phase "train" applies the dataset's augmentation with draws from
    ``rng``; "test" is deterministic. ``stats`` are the per-channel
    training-split statistics (unused by the synthetic set).
    """
    img = sample.image
    if dataset == "smallnorb":
        img = bilinear_resize(img, 48, 48)
        img = standardize(img, stats)
        img = _random_crop(img, 32, rng) if phase == "train" else _center_crop(img, 32)
    elif dataset in ("mnist", "fashionmnist"):
        img = standardize(img, stats)
        img = _pad(img, 2)
        if dataset == "fashionmnist" and augment_fashion and phase == "train":
            img = _random_crop(_pad(img, 4), 32, rng)
            if rng.random() < 0.5:
                img = img[:, :, ::-1]
    elif dataset == "svhn":
        if img.shape[1:] != (32, 32):
            img = bilinear_resize(img, 32, 32)
        img = standardize(img, stats)
    elif dataset == "cifar10":
        img = standardize(img, stats)
        if phase == "train":
            img = _random_crop(_pad(img, 4), 32, rng)
            if rng.random() < 0.5:
                img = img[:, :, ::-1]
    elif dataset == "synthetic":
        pass
    else:
        raise ValueError(f"unknown dataset {dataset!r}")
    return np.ascontiguousarray(img, dtype=np.float32)


# ---------------------------------------------------------------------------
# synthetic dataset
# ---------------------------------------------------------------------------

def synthetic_dataset(n, seed):
    """Rotated filled polygons, 3 classes, 32x32, with full viewpoint meta.

    The azimuth code sets the rotation angle and the elevation index sets
    the polygon size, so the viewpoint metadata genuinely reflects image
    content. Classes are balanced to within one sample and azimuth codes
    cycle through all 18 values.
    """
    if n < 1:
        raise ValueError("need n >= 1")
    samples = []
    for idx in range(n):
        label = idx % 3
        azimuth = 2 * ((idx // 3) % 18)
        elevation = (idx // 54) % 9
        lighting = (idx // 9) % 6
        rng = np.random.default_rng(np.random.SeedSequence([seed, idx]))
        img = _render_polygon(
            sides=label + 3,
            angle=np.deg2rad(azimuth * 10.0),
            radius=5.5 + 0.55 * elevation,
            brightness=0.55 + 0.07 * lighting,
            rng=rng,
        )
        meta = {
            "category": label, "instance": idx, "elevation": elevation,
            "azimuth": azimuth, "lighting": lighting,
        }
        samples.append(Sample(image=img, label=label, meta=meta))
    return samples


def _render_polygon(sides, angle, radius, brightness, rng):
    center = 15.5 + rng.uniform(-1.5, 1.5, size=2)
    angles = angle + 2 * np.pi * np.arange(sides) / sides
    vx = center[0] + radius * np.cos(angles)
    vy = center[1] + radius * np.sin(angles)
    yy, xx = np.mgrid[0:32, 0:32]
    inside = np.ones((32, 32), dtype=bool)
    for i in range(sides):
        j = (i + 1) % sides
        ex, ey = vx[j] - vx[i], vy[j] - vy[i]
        px, py = xx - vx[i], yy - vy[i]
        inside &= (ex * py - ey * px) >= 0
    img = np.where(inside, brightness, 0.08).astype(np.float32)
    img += rng.normal(scale=0.02, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0)[None]


# ---------------------------------------------------------------------------
# dataset orchestration
# ---------------------------------------------------------------------------

IDX_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}

NORB_TRAIN_STEM = "smallnorb-5x46789x9x18x6x2x96x96-training"
NORB_TEST_STEM = "smallnorb-5x01235x9x18x6x2x96x96-testing"


def _find_idx(root, name):
    for candidate in (root / name, root / f"{name}.gz"):
        if candidate.exists():
            return candidate
    raise DatasetMissing(f"{root / name}[.gz] not found")


def load_dataset(name, data_dir, synthetic_n=486, seed=0):
    """(train samples, test samples) for a dataset root.

    Layout under ``data_dir``: one subdirectory per dataset name holding
    the files documented in the README. The synthetic set needs no files;
    its test half reuses the generator with a shifted seed.
    """
    if name == "synthetic":
        return synthetic_dataset(synthetic_n, seed), synthetic_dataset(
            max(synthetic_n // 3, 54), seed + 1
        )
    root = Path(data_dir) / name
    if name in ("mnist", "fashionmnist"):
        if not root.exists():
            raise DatasetMissing(f"dataset directory {root} not found")
        tri = load_idx(_find_idx(root, IDX_FILES["train_images"]))
        trl = load_idx(_find_idx(root, IDX_FILES["train_labels"]))
        tei = load_idx(_find_idx(root, IDX_FILES["test_images"]))
        tel = load_idx(_find_idx(root, IDX_FILES["test_labels"]))
        train = [Sample(image=tri[i][None], label=int(trl[i])) for i in range(len(trl))]
        test = [Sample(image=tei[i][None], label=int(tel[i])) for i in range(len(tel))]
        return train, test
    if name == "smallnorb":
        def triplet(stem):
            return tuple(root / f"{stem}-{kind}.mat" for kind in ("dat", "cat", "info"))

        if not root.exists():
            raise DatasetMissing(f"dataset directory {root} not found")
        return (
            load_smallnorb(*triplet(NORB_TRAIN_STEM)),
            load_smallnorb(*triplet(NORB_TEST_STEM)),
        )
    if name == "cifar10":
        batch_root = root / "cifar-10-batches-bin"
        train = load_cifar10_bin(
            [batch_root / f"data_batch_{i}.bin" for i in range(1, 6)]
        )
        test = load_cifar10_bin([batch_root / "test_batch.bin"])
        return train, test
    if name == "svhn":
        return (
            load_svhn_mat(root / "train_32x32.mat"),
            load_svhn_mat(root / "test_32x32.mat"),
        )
    raise ValueError(f"unknown dataset {name!r}")
