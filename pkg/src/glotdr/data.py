"""Desk-scale data: synthetic shift generators for each training scenario
plus a bit-exact IDX-format reader/writer and simple corruption transforms.
"""

import os
import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass
class DomainDataset:
    x: np.ndarray
    y: np.ndarray = None     # None for unlabeled data
    domain_id: int = 0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if not np.all(np.isfinite(self.x)):
            raise ValueError("inputs must be finite")
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=np.int64)
            if self.y.shape[0] != self.x.shape[0]:
                raise ValueError("label count does not match input count")

    @property
    def size(self):
        return self.x.shape[0]


# ---------------------------------------------------------------------------
# generators

def _rotate2d(points, angle_deg, center):
    if angle_deg == 0.0:    # keep the zero-shift case bit-identical
        return np.array(points, dtype=np.float64, copy=True)
    a = np.deg2rad(angle_deg)
    R = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    return (points - center) @ R.T + center


def two_moons_shift(n, noise, angle_deg, translation, seed):
    """Two interleaved half-circles plus a target domain drawn from the same
    distribution then rotated about the moons' centroid and translated.

    Source and target re-use the same generator stream, so with angle 0 and
    translation 0 the two datasets are bit-identical.  n must be even; each
    class gets exactly n/2 points.
    """
    if n < 2 or n % 2:
        raise ValueError("n must be even and at least 2")
    translation = np.broadcast_to(np.asarray(translation, dtype=np.float64), (2,))

    def draw(rng):
        half = n // 2
        t = np.linspace(0.0, np.pi, half)
        outer = np.stack([np.cos(t), np.sin(t)], axis=1)
        inner = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
        x = np.concatenate([outer, inner], axis=0)
        x = x + rng.normal(0.0, noise, size=x.shape)
        y = np.concatenate([np.zeros(half, np.int64), np.ones(half, np.int64)])
        return x, y

    xs, ys = draw(np.random.default_rng(seed))
    xt, yt = draw(np.random.default_rng(seed))
    center = np.array([0.5, 0.25])     # midpoint of the two class means
    xt = _rotate2d(xt, angle_deg, center) + translation
    return (DomainDataset(xs, ys, domain_id=0),
            DomainDataset(xt, yt, domain_id=1))


def gaussian_blob_domains(K, M, shift, seed, n_per_class=50, dim=2,
                          sep=2.0, noise=0.5):
    """K domains of M Gaussian classes; class means are shared across
    domains (spread on a circle of radius `sep`), each domain adds its own
    offset drawn with scale `shift`."""
    if K < 2 or M < 2:
        raise ValueError("need at least two domains and two classes")
    if dim < 2:
        raise ValueError("dim must be at least 2")
    rng = np.random.default_rng(seed)
    means = np.zeros((M, dim))
    ang = 2.0 * np.pi * np.arange(M) / M
    means[:, 0] = sep * np.cos(ang)
    means[:, 1] = sep * np.sin(ang)
    out = []
    for k in range(K):
        offset = shift * rng.normal(size=dim)
        xs, ys = [], []
        for m in range(M):
            xs.append(means[m] + offset
                      + noise * rng.normal(size=(n_per_class, dim)))
            ys.append(np.full(n_per_class, m, np.int64))
        out.append(DomainDataset(np.concatenate(xs), np.concatenate(ys),
                                 domain_id=k))
    return out


def ssl_split(dataset, n_labeled, seed):
    """Class-balanced labeled/unlabeled split: exactly n_labeled/M points
    keep their labels per class, the rest are returned unlabeled."""
    if dataset.y is None:
        raise ValueError("dataset must be labeled")
    classes = np.unique(dataset.y)
    M = classes.shape[0]
    if n_labeled % M or n_labeled > dataset.size:
        raise ValueError("n_labeled must be divisible by the class count "
                         "and at most the dataset size")
    per = n_labeled // M
    rng = np.random.default_rng(seed)
    lab_idx = []
    for m in classes:
        idx = np.nonzero(dataset.y == m)[0]
        if idx.shape[0] < per:
            raise ValueError(f"class {int(m)} has only {idx.shape[0]} points, "
                             f"need {per}")
        lab_idx.append(rng.permutation(idx)[:per])
    lab_idx = np.sort(np.concatenate(lab_idx))
    mask = np.zeros(dataset.size, dtype=bool)
    mask[lab_idx] = True
    labeled = DomainDataset(dataset.x[mask], dataset.y[mask],
                            domain_id=dataset.domain_id)
    unlabeled = DomainDataset(dataset.x[~mask], None,
                              domain_id=dataset.domain_id)
    return labeled, unlabeled


# ---------------------------------------------------------------------------
# IDX files

IDX_MAGIC_LABELS = 2049
IDX_MAGIC_IMAGES = 2051


@dataclass
class IdxHeader:
    magic: int
    dims: tuple


class IdxFormatError(ValueError):
    pass


def read_idx(path):
    """Parse a big-endian IDX file.

    Label files (magic 2049) come back as int64; image files (magic 2051)
    as float64 scaled to [0, 1].  Malformed files raise IdxFormatError
    naming the offending offset and the expected vs actual byte counts.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: file too short for magic "
                             f"(4 bytes needed, got {len(raw)})")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic not in (IDX_MAGIC_LABELS, IDX_MAGIC_IMAGES):
        raise IdxFormatError(f"{path}: bad magic {magic:#010x} at offset 0")
    ndim = 1 if magic == IDX_MAGIC_LABELS else 3
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise IdxFormatError(f"{path}: truncated header at offset {len(raw)} "
                             f"(expected {header_len} bytes)")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    count = int(np.prod(dims))
    payload = raw[header_len:]
    if len(payload) != count:
        raise IdxFormatError(
            f"{path}: payload at offset {header_len} expected {count} bytes, "
            f"got {len(payload)}")
    flat = np.frombuffer(payload, dtype=np.uint8)
    if magic == IDX_MAGIC_LABELS:
        return flat.astype(np.int64)
    return (flat.astype(np.float64) / 255.0).reshape(dims)


def write_idx(path, array):
    """Inverse of read_idx: int arrays become label files, float image
    stacks are rescaled to bytes.  read->write round-trips byte-exactly."""
    array = np.asarray(array)
    if array.ndim == 1:
        if array.min() < 0 or array.max() > 255:
            raise ValueError("labels must fit in a byte")
        magic, dims = IDX_MAGIC_LABELS, array.shape
        payload = array.astype(np.uint8).tobytes()
    elif array.ndim == 3:
        magic, dims = IDX_MAGIC_IMAGES, array.shape
        payload = np.round(array * 255.0).astype(np.uint8).tobytes()
    else:
        raise ValueError("expected a 1-D label array or 3-D image stack")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{len(dims)}I", *dims))
        fh.write(payload)


# ---------------------------------------------------------------------------
# corruptions

CORRUPTIONS = ("gaussian_noise", "rotation")


def rotate_images(x, angle_deg):
    """Bilinear rotation of an (N, H, W) stack about each image center;
    angle 0 is the identity."""
    if angle_deg == 0.0:
        return np.array(x, dtype=np.float64, copy=True)
    out = np.empty_like(x, dtype=np.float64)
    for i in range(x.shape[0]):
        out[i] = ndimage.rotate(x[i], angle_deg, reshape=False, order=1,
                                mode="constant", cval=0.0)
    return out


def corrupt(inputs, kind, severity, seed):
    """Apply one corruption at integer severity 1..5 (deterministic per
    seed).  gaussian_noise adds sigma=0.1*severity noise; rotation turns by
    5*severity degrees.  Image stacks (3-D) are clamped back to [0, 1]."""
    if kind not in CORRUPTIONS:
        raise ValueError(f"unknown corruption {kind!r}")
    if not (isinstance(severity, (int, np.integer)) and 1 <= severity <= 5):
        raise ValueError("severity must be an integer in 1..5")
    inputs = np.asarray(inputs, dtype=np.float64)
    is_image = inputs.ndim == 3
    if kind == "gaussian_noise":
        rng = np.random.default_rng(seed)
        out = inputs + rng.normal(0.0, 0.1 * severity, size=inputs.shape)
    else:
        angle = 5.0 * severity
        if is_image:
            out = rotate_images(inputs, angle)
        else:
            out = _rotate2d(inputs, angle, inputs.mean(axis=0))
    if is_image:
        out = np.clip(out, 0.0, 1.0)
    return out
