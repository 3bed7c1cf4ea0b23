"""Stein variational particle updates with projection onto a norm ball.

Particles chase an unnormalized log-density through the kernelized Stein
direction; after every step they are projected back onto the ball around the
anchor, so the ball constraint holds exactly at every iteration.  The
pairwise reduction runs through the backend kernels with a fixed summation
order, so runs are reproducible bit for bit.
"""

from dataclasses import dataclass

import numpy as np

from . import backend


@dataclass
class KernelSpec:
    # positive width, or the tag "median_heuristic"
    bandwidth: object = "median_heuristic"

    def __post_init__(self):
        if isinstance(self.bandwidth, str):
            if self.bandwidth != "median_heuristic":
                raise ValueError(f"unknown bandwidth rule {self.bandwidth!r}")
        elif not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")


@dataclass
class BallSpec:
    center: np.ndarray
    radius: float
    norm: float = np.inf  # 2 or inf

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        if not self.radius > 0:
            raise ValueError("ball radius must be positive")
        if self.norm not in (2, np.inf):
            raise ValueError("ball norm must be 2 or inf")


@dataclass
class SvgdConfig:
    n: int
    iters: int = 15
    step: object = 0.002      # scalar, or callable l -> step for a per-iteration schedule
    init_noise: float = None  # None: radius/2 uniform noise around the anchor

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("need at least one particle")
        if self.iters < 0:
            raise ValueError("iteration count must be >= 0")
        if not callable(self.step) and not self.step > 0:
            raise ValueError("step size must be positive")


@dataclass
class ParticleSet:
    anchor: np.ndarray
    particles: np.ndarray  # (n, d)


def rbf_kernel(x, y, sigma):
    """k = exp(-||x-y||^2 / (2 sigma^2)) and its gradient in x."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    diff = x - y
    k = float(np.exp(-np.dot(diff, diff) / (2.0 * sigma * sigma)))
    return k, -diff / (sigma * sigma) * k


def median_bandwidth(particles):
    """sigma from the median of pairwise squared distances:
    sigma^2 = med^2 / (2 ln(n+1)), falling back to 1 when all points coincide.
    """
    pts = np.asarray(particles, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    n = pts.shape[0]
    if n < 2:
        raise ValueError("median bandwidth needs at least two particles")
    sq = backend.pairwise_sq_dists(pts, pts)
    iu = np.triu_indices(n, k=1)
    med2 = float(np.median(sq[iu]))
    if med2 == 0.0:
        return 1.0
    return float(np.sqrt(med2 / (2.0 * np.log(n + 1.0))))


def _batch_median_bandwidths(parts):
    """Per-set bandwidths for parts (B, n, d); sets of one get the fallback."""
    B, n, _ = parts.shape
    if n < 2:
        return np.ones(B)
    sq = np.einsum("bik,bik->bi", parts, parts)
    cross = np.einsum("bik,bjk->bij", parts, parts)
    d2 = sq[:, :, None] + sq[:, None, :] - 2.0 * cross
    iu = np.triu_indices(n, k=1)
    med2 = np.median(d2[:, iu[0], iu[1]], axis=1)
    med2 = np.maximum(med2, 0.0)
    sig = np.sqrt(med2 / (2.0 * np.log(n + 1.0)))
    sig[med2 == 0.0] = 1.0
    return sig


def _resolve_bandwidths(kernel, parts):
    if isinstance(kernel.bandwidth, str):
        return _batch_median_bandwidths(parts)
    return np.full(parts.shape[0], float(kernel.bandwidth))


def svgd_direction(particles, score_fn, kernel=None):
    """Per-particle update vectors (1/n) sum_j [k(X_j,X_i) score(X_j)
    + grad_{X_j} k(X_j,X_i)].

    score_fn maps the (n, d) particle array to (n, d) gradients of the target
    log-density.  With a single particle this degenerates to the raw score.
    """
    kernel = kernel or KernelSpec()
    parts = np.asarray(particles, dtype=np.float64)
    if parts.ndim == 1:
        parts = parts[:, None]
    scores = np.asarray(score_fn(parts), dtype=np.float64)
    bad = ~np.isfinite(scores).all(axis=-1)
    if bad.any():
        raise FloatingPointError(
            f"non-finite score at particle {int(np.nonzero(bad)[0][0])}")
    if parts.shape[0] == 1:
        return scores.copy()
    sig = _resolve_bandwidths(kernel, parts[None])
    return backend.svgd_directions(parts[None], scores[None], sig)[0]


def project_ball(x, ball):
    """Projection onto the ball; points already inside come back unchanged."""
    x = np.asarray(x, dtype=np.float64)
    c = ball.center
    if ball.norm == np.inf:
        return np.clip(x, c - ball.radius, c + ball.radius)
    diff = x - c
    nrm = float(np.linalg.norm(diff))
    if nrm <= ball.radius:
        return x
    scale = ball.radius / nrm
    out = c + scale * diff
    # rounding can leave the norm a ulp over the radius; shave until exact
    while np.linalg.norm(out - c) > ball.radius:
        scale = np.nextafter(scale, 0.0)
        out = c + scale * diff
    return out


def _project_batch(parts, anchors, radius, norm):
    """Project (B, n, d) particle sets onto balls around (B, d) anchors."""
    if norm == np.inf:
        lo = anchors[:, None, :] - radius
        hi = anchors[:, None, :] + radius
        return np.clip(parts, lo, hi)
    diff = parts - anchors[:, None, :]
    nrm = np.linalg.norm(diff, axis=-1)
    out = parts.copy()
    over = nrm > radius
    for b, i in zip(*np.nonzero(over)):
        d = diff[b, i]
        scale = radius / nrm[b, i]
        cand = anchors[b] + scale * d
        while np.linalg.norm(cand - anchors[b]) > radius:
            scale = np.nextafter(scale, 0.0)
            cand = anchors[b] + scale * d
        out[b, i] = cand
    return out


def projected_svgd_batch(anchors, score_fn, radius, norm, cfg, rng,
                         kernel=None):
    """Run projected SVGD for B independent anchors at once.

    anchors: (B, d); score_fn maps particles (B, n, d) to scores of the same
    shape (each row b uses the log-density attached to anchor b).  Returns
    particles (B, n, d), all inside their balls at every iteration.
    """
    kernel = kernel or KernelSpec()
    anchors = np.asarray(anchors, dtype=np.float64)
    B, d = anchors.shape
    noise = cfg.init_noise if cfg.init_noise is not None else radius / 2.0
    parts = anchors[:, None, :] + rng.uniform(-noise, noise, size=(B, cfg.n, d))
    parts = _project_batch(parts, anchors, radius, norm)
    for l in range(cfg.iters):
        scores = np.asarray(score_fn(parts), dtype=np.float64)
        if not np.isfinite(scores).all():
            bad = ~np.isfinite(scores).all(axis=-1)
            b, i = (int(v[0]) for v in np.nonzero(bad))
            raise FloatingPointError(f"non-finite score at anchor {b} particle {i}")
        if cfg.n == 1:
            dirs = scores
        else:
            sig = _resolve_bandwidths(kernel, parts)
            dirs = backend.svgd_directions(parts, scores, sig)
        eta = cfg.step(l) if callable(cfg.step) else cfg.step
        parts = _project_batch(parts + eta * dirs, anchors, radius, norm)
    return parts


def projected_svgd(score_fn, ball, cfg, rng, kernel=None):
    """Single-anchor wrapper around projected_svgd_batch.

    score_fn maps an (n, d) particle array to (n, d) scores.  Returns a
    ParticleSet whose particles all satisfy the ball constraint.
    """
    anchor = ball.center

    def batch_score(parts):
        return score_fn(parts[0])[None]

    parts = projected_svgd_batch(anchor[None, :], batch_score, ball.radius,
                                 ball.norm, cfg, rng, kernel=kernel)
    return ParticleSet(anchor=anchor, particles=parts[0])
