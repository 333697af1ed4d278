"""Format parsers, viewpoint splits, preprocessing, and the synthetic set."""

import struct

import numpy as np
import pytest

from qcaps import data_io as dio


# ---------------------------------------------------------------------------
# fixtures: tiny files in every supported format
# ---------------------------------------------------------------------------

def write_fixture_idx_images(path, n=10, h=28, w=28, seed=0):
    rng = np.random.default_rng(seed)
    imgs = rng.integers(0, 256, size=(n, h, w), dtype=np.uint8)
    dio.write_idx(path, imgs)
    return imgs

def write_fixture_idx_labels(path, n=10, seed=1):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, size=(n,), dtype=np.uint8)
    dio.write_idx(path, labels)
    return labels


def write_norb_matrix(path, array, magic):
    array = np.asarray(array)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", magic))
        fh.write(struct.pack("<I", array.ndim))
        dims = list(array.shape) + [1] * max(0, 3 - array.ndim)
        fh.write(struct.pack(f"<{len(dims)}I", *dims))
        fh.write(array.tobytes())


def write_fixture_norb(tmp_path, n=12):
    rng = np.random.default_rng(2)
    images = rng.integers(0, 256, size=(n, 2, 96, 96), dtype=np.uint8)
    cats = (np.arange(n) % 5).astype("<i4")
    info = np.zeros((n, 4), dtype="<i4")
    info[:, 0] = np.arange(n) % 10                # instance
    info[:, 1] = np.arange(n) % 9                 # elevation index
    info[:, 2] = 2 * (np.arange(n) % 18)          # azimuth code, even
    info[:, 3] = np.arange(n) % 6                 # lighting
    dat, cat, inf = tmp_path / "x-dat.mat", tmp_path / "x-cat.mat", tmp_path / "x-info.mat"
    write_norb_matrix(dat, images, dio.NORB_BYTE_MAGIC)
    write_norb_matrix(cat, cats, dio.NORB_INT_MAGIC)
    write_norb_matrix(inf, info, dio.NORB_INT_MAGIC)
    return dat, cat, inf, images, cats, info


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

def test_idx_image_round_trip_and_scaling(tmp_path):
    path = tmp_path / "imgs-idx3-ubyte"
    imgs = write_fixture_idx_images(path)
    loaded = dio.load_idx(path)
    assert loaded.shape == (10, 28, 28)
    assert loaded.min() >= 0.0 and loaded.max() <= 1.0
    np.testing.assert_allclose(loaded * 255.0, imgs, atol=1e-4)

    raw, magic = dio.read_idx_raw(path)
    out = tmp_path / "copy"
    dio.write_idx(out, raw, magic)
    assert out.read_bytes() == path.read_bytes()


def test_idx_labels(tmp_path):
    path = tmp_path / "labels-idx1-ubyte"
    labels = write_fixture_idx_labels(path)
    loaded = dio.load_idx(path)
    assert loaded.shape == (10,)
    np.testing.assert_array_equal(loaded, labels)


def test_idx_gzip_transparent(tmp_path):
    import gzip

    path = tmp_path / "imgs-idx3-ubyte"
    imgs = write_fixture_idx_images(path)
    gz = tmp_path / "imgs-idx3-ubyte.gz"
    gz.write_bytes(gzip.compress(path.read_bytes()))
    np.testing.assert_array_equal(dio.load_idx(gz) * 255.0, imgs)


def test_idx_bad_magic(tmp_path):
    path = tmp_path / "bad"
    path.write_bytes(struct.pack(">I", 0xDEADBEEF) + b"\x00" * 16)
    with pytest.raises(dio.BadMagic):
        dio.load_idx(path)


def test_idx_truncated_payload(tmp_path):
    path = tmp_path / "trunc"
    data = struct.pack(">IIII", dio.IDX_IMAGE_MAGIC, 10, 28, 28) + b"\x00" * 100
    path.write_bytes(data)
    with pytest.raises(dio.TruncatedFile) as exc:
        dio.load_idx(path)
    assert exc.value.expected == 16 + 7840
    assert exc.value.actual == 116


# ---------------------------------------------------------------------------
# stereo matrices
# ---------------------------------------------------------------------------

def test_norb_loader_round_trip(tmp_path):
    dat, cat, inf, images, cats, info = write_fixture_norb(tmp_path)
    samples = dio.load_smallnorb(dat, cat, inf)
    assert len(samples) == 12
    s = samples[3]
    assert s.image.shape == (2, 96, 96)
    np.testing.assert_allclose(s.image * 255.0, images[3], atol=1e-4)
    assert s.label == int(cats[3])
    assert s.meta["azimuth"] == int(info[3, 2])
    for s in samples:
        assert s.meta["azimuth"] % 2 == 0 and 0 <= s.meta["azimuth"] <= 34
        assert 0 <= s.meta["elevation"] <= 8
        assert 30 + 5 * s.meta["elevation"] in dio.ELEVATION_DEGREES


def test_norb_bad_magic(tmp_path):
    path = tmp_path / "bad.mat"
    path.write_bytes(struct.pack("<II", 0x12345678, 1) + struct.pack("<III", 1, 1, 1))
    with pytest.raises(dio.BadMagic):
        dio.read_norb_matrix(path)


def test_norb_missing_companion(tmp_path):
    dat, cat, inf, *_ = write_fixture_norb(tmp_path)
    with pytest.raises(dio.MissingCompanion):
        dio.load_smallnorb(dat, cat, tmp_path / "nope.mat")


def test_norb_dimension_mismatch(tmp_path):
    rng = np.random.default_rng(3)
    bad = rng.integers(0, 256, size=(4, 3, 96, 96), dtype=np.uint8)  # 3 channels
    dat = tmp_path / "bad-dat.mat"
    write_norb_matrix(dat, bad, dio.NORB_BYTE_MAGIC)
    _, cat, inf, *_ = write_fixture_norb(tmp_path)
    with pytest.raises(dio.DimensionMismatch):
        dio.load_smallnorb(dat, cat, inf)


def test_norb_truncated(tmp_path):
    dat, *_ = write_fixture_norb(tmp_path)
    clipped = dat.read_bytes()[:-100]
    bad = tmp_path / "clip.mat"
    bad.write_bytes(clipped)
    with pytest.raises(dio.TruncatedFile):
        dio.read_norb_matrix(bad)


# ---------------------------------------------------------------------------
# other loaders
# ---------------------------------------------------------------------------

def test_cifar_binary_loader(tmp_path):
    rng = np.random.default_rng(4)
    records = []
    labels = []
    for i in range(8):
        label = int(rng.integers(0, 10))
        pixels = rng.integers(0, 256, size=3072, dtype=np.uint8)
        records.append(bytes([label]) + pixels.tobytes())
        labels.append(label)
    path = tmp_path / "data_batch_1.bin"
    path.write_bytes(b"".join(records))
    samples = dio.load_cifar10_bin([path])
    assert len(samples) == 8
    assert samples[0].image.shape == (3, 32, 32)
    assert [s.label for s in samples] == labels


def test_svhn_mat_loader(tmp_path):
    from scipy.io import savemat

    rng = np.random.default_rng(5)
    x = rng.integers(0, 256, size=(32, 32, 3, 6), dtype=np.uint8)
    y = np.array([[1], [2], [10], [4], [5], [6]], dtype=np.uint8)  # 10 encodes digit 0
    path = tmp_path / "train_32x32.mat"
    savemat(str(path), {"X": x, "y": y})
    samples = dio.load_svhn_mat(path)
    assert len(samples) == 6
    assert samples[0].image.shape == (3, 32, 32)
    assert samples[2].label == 0
    np.testing.assert_allclose(samples[1].image[0] * 255.0, x[:, :, 0, 1], atol=1e-4)


# ---------------------------------------------------------------------------
# viewpoint splits
# ---------------------------------------------------------------------------

def test_split_sets_disjoint_and_sized():
    spec_a = dio.SplitSpec(mode="novel-azimuth")
    assert len(spec_a.train_azimuths) == 6
    assert len(spec_a.test_azimuths()) == 12
    assert not set(spec_a.train_azimuths) & set(spec_a.test_azimuths())
    spec_e = dio.SplitSpec(mode="novel-elevation")
    assert len(spec_e.train_elevations) == 3
    assert len(spec_e.test_elevations()) == 6
    assert not set(spec_e.train_elevations) & set(spec_e.test_elevations())


def test_azimuth_split_fractions_on_balanced_grid():
    train = dio.synthetic_dataset(486, seed=0)
    test = dio.synthetic_dataset(486, seed=1)
    spl_train, spl_test = dio.viewpoint_split((train, test), dio.SplitSpec("novel-azimuth"))
    assert len(spl_train) == 486 // 3
    assert len(spl_test) == 486 * 2 // 3
    train_codes = {s.meta["azimuth"] for s in spl_train}
    test_codes = {s.meta["azimuth"] for s in spl_test}
    assert train_codes == set(dio.TRAIN_AZIMUTH_CODES)
    assert not train_codes & test_codes


def test_elevation_split_fractions():
    train = dio.synthetic_dataset(486, seed=0)
    test = dio.synthetic_dataset(486, seed=1)
    spl_train, spl_test = dio.viewpoint_split((train, test), dio.SplitSpec("novel-elevation"))
    assert len(spl_train) == 486 // 3
    assert len(spl_test) == 486 * 2 // 3
    assert {s.meta["elevation"] for s in spl_train} == {0, 1, 2}
    assert {s.meta["elevation"] for s in spl_test} == {3, 4, 5, 6, 7, 8}


def test_standard_split_passthrough():
    train = dio.synthetic_dataset(30, seed=0)
    test = dio.synthetic_dataset(12, seed=1)
    t1, t2 = dio.viewpoint_split((train, test), dio.SplitSpec("standard"))
    assert len(t1) == 30 and len(t2) == 12


def test_familiar_subset():
    test = dio.synthetic_dataset(486, seed=1)
    fam = dio.familiar_test_subset(test, dio.SplitSpec("novel-azimuth"))
    assert len(fam) == 486 // 3
    assert all(s.meta["azimuth"] in dio.TRAIN_AZIMUTH_CODES for s in fam)


def test_split_requires_meta():
    plain = [dio.Sample(image=np.zeros((1, 32, 32)), label=0)]
    with pytest.raises(dio.MissingMeta):
        dio.viewpoint_split((plain, plain), dio.SplitSpec("novel-azimuth"))


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def test_smallnorb_test_preprocess_center_crop():
    rng = np.random.default_rng(6)
    img = rng.uniform(0, 1, size=(2, 96, 96)).astype(np.float32)
    sample = dio.Sample(image=img, label=0)
    stats = (np.zeros(2, np.float32), np.ones(2, np.float32))
    out = dio.preprocess(sample, "smallnorb", "test", rng, stats)
    assert out.shape == (2, 32, 32)
    resized = dio.bilinear_resize(img, 48, 48)
    np.testing.assert_allclose(out, resized[:, 8:40, 8:40], atol=1e-6)


def test_smallnorb_train_crop_deterministic_per_rng():
    rng1 = np.random.default_rng(7)
    rng2 = np.random.default_rng(7)
    img = np.random.default_rng(8).uniform(0, 1, size=(2, 96, 96)).astype(np.float32)
    sample = dio.Sample(image=img, label=0)
    stats = (np.zeros(2, np.float32), np.ones(2, np.float32))
    a = dio.preprocess(sample, "smallnorb", "train", rng1, stats)
    b = dio.preprocess(sample, "smallnorb", "train", rng2, stats)
    assert a.tobytes() == b.tobytes()


def test_mnist_preprocess_zero_border():
    img = np.random.default_rng(9).uniform(0.1, 1, size=(1, 28, 28)).astype(np.float32)
    sample = dio.Sample(image=img, label=3)
    stats = (np.array([0.5], np.float32), np.array([0.25], np.float32))
    out = dio.preprocess(sample, "mnist", "train", np.random.default_rng(0), stats)
    assert out.shape == (1, 32, 32)
    assert np.all(out[:, :2, :] == 0.0) and np.all(out[:, :, -2:] == 0.0)
    np.testing.assert_allclose(out[0, 2:30, 2:30], (img[0] - 0.5) / 0.25, atol=1e-6)


def test_cifar_train_crop_from_padded_canvas():
    img = np.random.default_rng(10).uniform(0, 1, size=(3, 32, 32)).astype(np.float32)
    sample = dio.Sample(image=img, label=1)
    stats = (np.zeros(3, np.float32), np.ones(3, np.float32))
    out = dio.preprocess(sample, "cifar10", "train", np.random.default_rng(1), stats)
    assert out.shape == (3, 32, 32)
    test_out = dio.preprocess(sample, "cifar10", "test", np.random.default_rng(1), stats)
    np.testing.assert_allclose(test_out, img, atol=1e-6)


def test_bilinear_resize_constant_preserved():
    img = np.full((1, 96, 96), 0.37, dtype=np.float32)
    out = dio.bilinear_resize(img, 48, 48)
    np.testing.assert_allclose(out, 0.37, atol=1e-6)


def test_bilinear_resize_matches_manual_2x2():
    img = np.array([[[0.0, 1.0], [2.0, 3.0]]], dtype=np.float32)
    out = dio.bilinear_resize(img, 1, 1)
    np.testing.assert_allclose(out, [[[1.5]]], atol=1e-6)


# ---------------------------------------------------------------------------
# synthetic dataset
# ---------------------------------------------------------------------------

def test_synthetic_balance_and_determinism():
    a = dio.synthetic_dataset(300, seed=7)
    b = dio.synthetic_dataset(300, seed=7)
    counts = np.bincount([s.label for s in a], minlength=3)
    assert counts.max() - counts.min() <= 1
    assert all(
        x.image.tobytes() == y.image.tobytes() and x.label == y.label
        for x, y in zip(a, b)
    )


def test_synthetic_covers_all_azimuths():
    samples = dio.synthetic_dataset(108, seed=0)
    assert {s.meta["azimuth"] for s in samples} == set(range(0, 36, 2))


def test_synthetic_images_in_range():
    for s in dio.synthetic_dataset(24, seed=3):
        assert s.image.shape == (1, 32, 32)
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0
        assert 0 <= s.label < 3


def test_load_dataset_missing(tmp_path):
    with pytest.raises(dio.DatasetMissing):
        dio.load_dataset("mnist", tmp_path)
