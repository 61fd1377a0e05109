import struct

import numpy as np
import pytest

from simigan import data as dat
from simigan.errors import ContractError, ParseError


def write_idx_pair(tmp_path, images, labels):
    """Write a well-formed image/label fixture pair and return the paths."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    img_path = tmp_path / "images.idx"
    lbl_path = tmp_path / "labels.idx"
    img_path.write_bytes(struct.pack(">IIII", 0x803, n, rows, cols) + images.tobytes())
    lbl_path.write_bytes(struct.pack(">II", 0x801, labels.size) + labels.tobytes())
    return img_path, lbl_path


def test_load_idx_fixture(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(10, 28, 28))
    labels = rng.integers(0, 10, size=10)
    img, lbl = write_idx_pair(tmp_path, images, labels)
    ds = dat.load_idx(img, lbl)
    assert ds.n == 10 and ds.d == 784
    assert ds.image_shape == (28, 28)
    np.testing.assert_array_equal(ds.features[3], images[3].reshape(-1).astype(float))
    np.testing.assert_array_equal(ds.labels, labels)


def test_load_idx_count_mismatch(tmp_path):
    img, lbl = write_idx_pair(
        tmp_path, np.zeros((4, 2, 2), dtype=np.uint8), np.zeros(3, dtype=np.uint8)
    )
    with pytest.raises(ParseError, match="4 images.*3 labels"):
        dat.load_idx(img, lbl)


def test_load_idx_truncated(tmp_path):
    img, lbl = write_idx_pair(
        tmp_path, np.zeros((4, 2, 2), dtype=np.uint8), np.zeros(4, dtype=np.uint8)
    )
    raw = img.read_bytes()
    img.write_bytes(raw[:-5])
    with pytest.raises(ParseError, match="wanted 16 bytes, got 11"):
        dat.load_idx(img, lbl)


def test_load_idx_bad_magic(tmp_path):
    img, lbl = write_idx_pair(
        tmp_path, np.zeros((1, 2, 2), dtype=np.uint8), np.zeros(1, dtype=np.uint8)
    )
    raw = bytearray(img.read_bytes())
    raw[3] = 0x99
    img.write_bytes(bytes(raw))
    with pytest.raises(ParseError, match="magic"):
        dat.load_idx(img, lbl)


def test_load_csv_fixture(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("f0,f1,label\n0.5,1.5,0\n1.0,2.0,1\n-1.0,0.0,1\n")
    ds = dat.load_csv(path, label_column="label", num_classes=2)
    assert ds.n == 3 and ds.d == 2
    np.testing.assert_array_equal(ds.labels, [0, 1, 1])


def test_load_csv_label_out_of_range(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("f0,label\n0.5,0\n1.0,2\n")
    with pytest.raises(ParseError, match=r"label 2 outside.*\[0, 2\)"):
        dat.load_csv(path, label_column="label", num_classes=2)


def test_load_csv_ragged_row(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("f0,f1\n1,2\n1\n")
    with pytest.raises(ParseError, match="line 3"):
        dat.load_csv(path)


def test_load_csv_non_numeric(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("f0,f1\n1,2\n1,oops\n")
    with pytest.raises(ParseError, match="line 3"):
        dat.load_csv(path)


def test_load_csv_wide_feature_file(tmp_path):
    path = tmp_path / "features.csv"
    header = ",".join(f"f{i}" for i in range(2048))
    row = ",".join("0.25" for _ in range(2048))
    path.write_text(header + "\n" + row + "\n" + row + "\n")
    ds = dat.load_csv(path)
    assert ds.d == 2048


def test_synth_blobs_single_class():
    ds = dat.synth_blobs(1, 20, 3, spread=5.0, noise=1.0, seed=0)
    assert np.all(ds.labels == 0)


def test_synth_blobs_centroid_oracle():
    ds = dat.synth_blobs(4, 100, 5, spread=20.0, noise=1.0, seed=1)
    centroids = np.stack([ds.features[ds.labels == k].mean(axis=0) for k in range(4)])
    nearest = np.argmin(
        np.linalg.norm(ds.features[:, None, :] - centroids[None], axis=2), axis=1
    )
    assert np.array_equal(nearest, ds.labels)


def test_synth_blobs_deterministic():
    a = dat.synth_blobs(3, 10, 4, spread=8.0, noise=0.5, seed=42)
    b = dat.synth_blobs(3, 10, 4, spread=8.0, noise=0.5, seed=42)
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_train_test_split_disjoint():
    ds = dat.synth_blobs(3, 50, 4, spread=8.0, noise=0.5, seed=0)
    train, test = dat.train_test_split(ds, 0.2, seed=5)
    assert train.n + test.n == ds.n
    assert test.n == 30
    combined = np.concatenate([train.features, test.features])
    assert np.unique(combined, axis=0).shape[0] == ds.n  # no index reused


def test_subsample_identity():
    ds = dat.synth_blobs(3, 40, 2, spread=8.0, noise=0.5, seed=0)
    out = dat.subsample_imbalanced(ds, dat.ImbalanceSpec(fractions={}), seed=0)
    assert out.n == ds.n


def test_subsample_single_class_fraction():
    ds = dat.synth_blobs(3, 100, 2, spread=8.0, noise=0.5, seed=0)
    out = dat.subsample_imbalanced(ds, dat.ImbalanceSpec(fractions={0: 0.1}), seed=0)
    counts = np.bincount(out.labels, minlength=3)
    np.testing.assert_array_equal(counts, [10, 100, 100])


def test_subsample_three_class_fractions():
    ds = dat.synth_blobs(6, 100, 2, spread=12.0, noise=0.5, seed=0)
    spec = dat.ImbalanceSpec(fractions={1: 0.1, 3: 0.3, 5: 0.5})
    out = dat.subsample_imbalanced(ds, spec, seed=0)
    counts = np.bincount(out.labels, minlength=6)
    np.testing.assert_array_equal(counts, [100, 10, 100, 30, 100, 50])


def test_subsample_preserves_feature_values():
    ds = dat.synth_blobs(2, 50, 3, spread=8.0, noise=0.5, seed=3)
    out = dat.subsample_imbalanced(ds, dat.ImbalanceSpec(fractions={0: 0.5}), seed=1)
    original = {row.tobytes() for row in ds.features}
    assert all(row.tobytes() in original for row in out.features)


def test_subsample_empty_class_error():
    ds = dat.synth_blobs(2, 5, 2, spread=8.0, noise=0.5, seed=0)
    with pytest.raises(ContractError, match="class 0"):
        dat.subsample_imbalanced(ds, dat.ImbalanceSpec(fractions={0: 0.1}), seed=0)


def test_imbalance_spec_validation():
    with pytest.raises(ContractError):
        dat.ImbalanceSpec(fractions={0: 0.0})
    with pytest.raises(ContractError):
        dat.ImbalanceSpec(fractions={0: 1.5})


def test_normalize_signed_endpoints():
    ds = dat.Dataset(
        features=np.array([[0.0, 0.0], [255.0, 255.0], [127.5, 0.0]]),
        labels=None,
        num_classes=0,
    )
    out, params = dat.normalize(ds, "signed")
    np.testing.assert_allclose(out.features[0], [-1.0, -1.0], atol=1e-12)
    np.testing.assert_allclose(out.features[1], [1.0, 1.0], atol=1e-12)
    np.testing.assert_allclose(out.features[2], [0.0, -1.0], atol=1e-12)
    assert out.normalization == "signed"


def test_normalize_unit_endpoints():
    ds = dat.Dataset(
        features=np.array([[0.0], [255.0]]), labels=None, num_classes=0
    )
    out, _ = dat.normalize(ds, "unit")
    np.testing.assert_allclose(out.features, [[0.0], [1.0]], atol=1e-12)


def test_normalize_round_trip():
    rng = np.random.default_rng(6)
    ds = dat.Dataset(features=rng.normal(size=(30, 5)) * 7, labels=None, num_classes=0)
    out, params = dat.normalize(ds, "signed")
    np.testing.assert_allclose(dat.denormalize(out.features, params), ds.features, atol=1e-12)


def test_normalize_constant_feature_midpoint():
    ds = dat.Dataset(
        features=np.array([[1.0, 3.0], [1.0, 5.0]]), labels=None, num_classes=0
    )
    out, params = dat.normalize(ds, "signed")
    np.testing.assert_allclose(out.features[:, 0], [0.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(dat.denormalize(out.features, params)[:, 0], [1.0, 1.0])


def test_test_split_may_exceed_train_range():
    train = dat.Dataset(features=np.array([[0.0], [10.0]]), labels=None, num_classes=0)
    test = dat.Dataset(features=np.array([[12.0]]), labels=None, num_classes=0)
    _, params = dat.normalize(train, "unit")
    mapped = dat.apply_normalization(test, params)
    assert mapped.features[0, 0] > 1.0
