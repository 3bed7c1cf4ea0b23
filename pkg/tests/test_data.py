"""Synthetic shift generators, IDX file IO, and corruption transforms."""

import struct

import numpy as np
import pytest

from glotdr import data


# ---------------------------------------------------------------------------
# DomainDataset

def test_domain_dataset_validation():
    with pytest.raises(ValueError):
        data.DomainDataset(np.array([[np.inf, 0.0]]))
    with pytest.raises(ValueError):
        data.DomainDataset(np.zeros((3, 2)), np.zeros(2, int))
    d = data.DomainDataset(np.zeros((3, 2)), domain_id=7)
    assert d.y is None and d.size == 3 and d.domain_id == 7


def test_domain_dataset_casts_dtypes():
    d = data.DomainDataset([[1, 2]], [3])
    assert d.x.dtype == np.float64 and d.y.dtype == np.int64


# ---------------------------------------------------------------------------
# two moons

def test_two_moons_zero_shift_identical():
    src, tgt = data.two_moons_shift(40, 0.1, 0.0, (0.0, 0.0), seed=0)
    assert np.array_equal(src.x, tgt.x)
    assert np.array_equal(src.y, tgt.y)
    assert src.domain_id == 0 and tgt.domain_id == 1


def test_two_moons_translation_only():
    src, tgt = data.two_moons_shift(40, 0.1, 0.0, (1.5, -0.5), seed=1)
    assert np.allclose(tgt.x, src.x + np.array([1.5, -0.5]), atol=0)


def test_two_moons_rotation_about_centroid():
    # 180 degrees about (0.5, 0.25): target = 2*center - source
    src, tgt = data.two_moons_shift(60, 0.05, 180.0, (0.0, 0.0), seed=2)
    center = np.array([0.5, 0.25])
    assert np.allclose(tgt.x, 2 * center - src.x, atol=1e-12)


def test_two_moons_class_balance_and_shape():
    src, tgt = data.two_moons_shift(50, 0.1, 30.0, (0.0, 0.0), seed=3)
    for d in (src, tgt):
        assert d.x.shape == (50, 2)
        assert np.sum(d.y == 0) == 25 and np.sum(d.y == 1) == 25


def test_two_moons_class_means_noiseless():
    src, _ = data.two_moons_shift(200, 0.0, 0.0, (0.0, 0.0), seed=4)
    m0 = src.x[src.y == 0].mean(axis=0)
    m1 = src.x[src.y == 1].mean(axis=0)
    # half-circle means: outer at (0, 2/pi)-ish, inner mirrored about center
    assert np.allclose(m0 + m1, [1.0, 0.5], atol=1e-9)
    assert m0[1] > 0.5 and m1[1] < 0.0


def test_two_moons_odd_or_tiny_n_rejected():
    with pytest.raises(ValueError):
        data.two_moons_shift(41, 0.1, 0.0, (0.0, 0.0), seed=0)
    with pytest.raises(ValueError):
        data.two_moons_shift(0, 0.1, 0.0, (0.0, 0.0), seed=0)


def test_two_moons_seed_determinism():
    a = data.two_moons_shift(30, 0.1, 20.0, (0.5, 0.0), seed=5)
    b = data.two_moons_shift(30, 0.1, 20.0, (0.5, 0.0), seed=5)
    c = data.two_moons_shift(30, 0.1, 20.0, (0.5, 0.0), seed=6)
    assert np.array_equal(a[1].x, b[1].x)
    assert not np.array_equal(a[1].x, c[1].x)


# ---------------------------------------------------------------------------
# blob domains

def test_blob_domains_shapes_and_labels():
    doms = data.gaussian_blob_domains(3, 4, 0.5, seed=0, n_per_class=10,
                                      dim=5)
    assert len(doms) == 3
    for k, d in enumerate(doms):
        assert d.domain_id == k
        assert d.x.shape == (40, 5)
        for m in range(4):
            assert np.sum(d.y == m) == 10


def test_blob_domains_class_means_on_circle():
    doms = data.gaussian_blob_domains(2, 4, 0.0, seed=1, n_per_class=200,
                                      dim=3, sep=2.0, noise=0.05)
    ang = 2.0 * np.pi * np.arange(4) / 4
    want = np.zeros((4, 3))
    want[:, 0] = 2.0 * np.cos(ang)
    want[:, 1] = 2.0 * np.sin(ang)
    tol = 5 * 0.05 / np.sqrt(200)
    for d in doms:                     # shift=0: no per-domain offset
        for m in range(4):
            got = d.x[d.y == m].mean(axis=0)
            assert np.max(np.abs(got - want[m])) < tol


def test_blob_domains_shift_moves_domains_apart():
    doms = data.gaussian_blob_domains(2, 2, 3.0, seed=2, n_per_class=100,
                                      noise=0.05)
    gap = np.linalg.norm(doms[0].x.mean(axis=0) - doms[1].x.mean(axis=0))
    assert gap > 0.5


def test_blob_domains_validation():
    with pytest.raises(ValueError):
        data.gaussian_blob_domains(1, 2, 0.0, seed=0)
    with pytest.raises(ValueError):
        data.gaussian_blob_domains(2, 1, 0.0, seed=0)
    with pytest.raises(ValueError):
        data.gaussian_blob_domains(2, 2, 0.0, seed=0, dim=1)


# ---------------------------------------------------------------------------
# semi-supervised split

def split_fixture():
    rng = np.random.default_rng(7)
    return data.DomainDataset(rng.normal(size=(30, 2)),
                              np.repeat([0, 1, 2], 10), domain_id=3)


def test_ssl_split_counts_and_balance():
    labeled, unlabeled = data.ssl_split(split_fixture(), 12, seed=0)
    assert labeled.size == 12 and unlabeled.size == 18
    assert unlabeled.y is None
    assert labeled.domain_id == 3 and unlabeled.domain_id == 3
    for m in range(3):
        assert np.sum(labeled.y == m) == 4


def test_ssl_split_disjoint_union():
    ds = split_fixture()
    labeled, unlabeled = data.ssl_split(ds, 12, seed=1)
    both = np.concatenate([labeled.x, unlabeled.x])
    key = np.lexsort(both.T)
    key0 = np.lexsort(ds.x.T)
    assert np.array_equal(both[key], ds.x[key0])


def test_ssl_split_all_labeled():
    labeled, unlabeled = data.ssl_split(split_fixture(), 30, seed=2)
    assert labeled.size == 30 and unlabeled.size == 0
    assert unlabeled.x.shape == (0, 2)


def test_ssl_split_validation():
    ds = split_fixture()
    with pytest.raises(ValueError):
        data.ssl_split(ds, 13, seed=0)          # not divisible by 3
    with pytest.raises(ValueError):
        data.ssl_split(ds, 33, seed=0)          # larger than dataset
    with pytest.raises(ValueError):
        data.ssl_split(data.DomainDataset(np.zeros((2, 2))), 2, seed=0)
    skewed = data.DomainDataset(np.zeros((4, 2)), np.array([0, 0, 0, 1]))
    with pytest.raises(ValueError):
        data.ssl_split(skewed, 4, seed=0)       # class 1 has one point


def test_ssl_split_deterministic():
    a = data.ssl_split(split_fixture(), 12, seed=5)[0]
    b = data.ssl_split(split_fixture(), 12, seed=5)[0]
    assert np.array_equal(a.x, b.x)


# ---------------------------------------------------------------------------
# IDX files

def idx_bytes(magic, dims, payload):
    return (struct.pack(">I", magic)
            + struct.pack(f">{len(dims)}I", *dims) + payload)


def test_read_idx_labels(tmp_path):
    p = tmp_path / "labels.idx"
    p.write_bytes(idx_bytes(2049, (3,), bytes([0, 255, 7])))
    out = data.read_idx(p)
    assert out.dtype == np.int64
    assert np.array_equal(out, [0, 255, 7])


def test_read_idx_images_scaling(tmp_path):
    p = tmp_path / "img.idx"
    p.write_bytes(idx_bytes(2051, (2, 1, 1), bytes([0xFF, 0x00])))
    out = data.read_idx(p)
    assert out.dtype == np.float64 and out.shape == (2, 1, 1)
    assert out[0, 0, 0] == 1.0 and out[1, 0, 0] == 0.0


def test_read_idx_bad_magic(tmp_path):
    p = tmp_path / "bad.idx"
    p.write_bytes(idx_bytes(1234, (1,), bytes([0])))
    with pytest.raises(data.IdxFormatError, match="offset 0"):
        data.read_idx(p)


def test_read_idx_too_short(tmp_path):
    p = tmp_path / "short.idx"
    p.write_bytes(b"\x00\x00")
    with pytest.raises(data.IdxFormatError, match="4 bytes needed"):
        data.read_idx(p)


def test_read_idx_truncated_header(tmp_path):
    p = tmp_path / "hdr.idx"
    p.write_bytes(struct.pack(">I", 2051) + struct.pack(">I", 1))
    with pytest.raises(data.IdxFormatError, match="truncated header"):
        data.read_idx(p)


def test_read_idx_payload_size_mismatch(tmp_path):
    p = tmp_path / "pay.idx"
    p.write_bytes(idx_bytes(2049, (5,), bytes([1, 2, 3])))
    with pytest.raises(data.IdxFormatError,
                       match="expected 5 bytes, got 3"):
        data.read_idx(p)


def test_idx_round_trip_byte_exact(tmp_path):
    rng = np.random.default_rng(8)
    raw_labels = idx_bytes(2049, (6,), rng.integers(0, 256, 6,
                                                    dtype=np.uint8).tobytes())
    raw_images = idx_bytes(2051, (2, 3, 4),
                           rng.integers(0, 256, 24, dtype=np.uint8).tobytes())
    for name, raw in (("l.idx", raw_labels), ("i.idx", raw_images)):
        src = tmp_path / name
        dst = tmp_path / ("rt_" + name)
        src.write_bytes(raw)
        data.write_idx(dst, data.read_idx(src))
        assert dst.read_bytes() == raw


def test_write_idx_value_round_trip(tmp_path):
    x = np.random.default_rng(9).uniform(size=(3, 4, 4))
    p = tmp_path / "x.idx"
    data.write_idx(p, x)
    back = data.read_idx(p)
    assert np.max(np.abs(back - x)) <= 0.5 / 255 + 1e-12


def test_write_idx_validation(tmp_path):
    with pytest.raises(ValueError):
        data.write_idx(tmp_path / "a.idx", np.array([-1, 2]))
    with pytest.raises(ValueError):
        data.write_idx(tmp_path / "b.idx", np.zeros((2, 2)))


# ---------------------------------------------------------------------------
# corruptions

def test_corruptions_registry():
    assert data.CORRUPTIONS == ("gaussian_noise", "rotation")


def test_corrupt_validation():
    x = np.zeros((4, 2))
    with pytest.raises(ValueError):
        data.corrupt(x, "blur", 1, seed=0)
    for bad in (0, 6, 2.5):
        with pytest.raises(ValueError):
            data.corrupt(x, "gaussian_noise", bad, seed=0)


def test_corrupt_gaussian_noise_scale():
    x = np.zeros((200, 100))
    for sev in (1, 3, 5):
        out = data.corrupt(x, "gaussian_noise", sev, seed=10)
        assert np.std(out) == pytest.approx(0.1 * sev, rel=0.02)


def test_corrupt_deterministic_per_seed():
    x = np.zeros((5, 3))
    a = data.corrupt(x, "gaussian_noise", 2, seed=11)
    b = data.corrupt(x, "gaussian_noise", 2, seed=11)
    c = data.corrupt(x, "gaussian_noise", 2, seed=12)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_corrupt_images_clamped():
    x = np.random.default_rng(13).uniform(size=(2, 8, 8))
    out = data.corrupt(x, "gaussian_noise", 5, seed=14)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_corrupt_rotation_preserves_point_cloud_mean():
    x = np.random.default_rng(15).normal(size=(50, 2))
    out = data.corrupt(x, "rotation", 4, seed=0)
    assert np.allclose(out.mean(axis=0), x.mean(axis=0), atol=1e-9)
    # pairwise distances preserved by a rigid rotation
    d0 = np.linalg.norm(x[0] - x[1])
    assert np.linalg.norm(out[0] - out[1]) == pytest.approx(d0, abs=1e-9)


def test_rotate_images_zero_angle_identity():
    x = np.random.default_rng(16).uniform(size=(2, 5, 5))
    assert np.array_equal(data.rotate_images(x, 0.0), x)


def test_rotate_images_center_pixel_stable():
    x = np.zeros((1, 9, 9))
    x[0, 4, 4] = 1.0
    out = data.rotate_images(x, 25.0)
    assert out[0, 4, 4] == pytest.approx(1.0, abs=1e-6)
