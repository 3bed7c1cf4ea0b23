"""Kernelized Stein updates, bandwidth heuristic, and ball projection."""

import numpy as np
import pytest

from glotdr import svgd


# ---------------------------------------------------------------------------
# specs

def test_kernel_spec_validation():
    svgd.KernelSpec()                      # median heuristic default
    svgd.KernelSpec(bandwidth=1.5)
    with pytest.raises(ValueError):
        svgd.KernelSpec(bandwidth="mean")
    with pytest.raises(ValueError):
        svgd.KernelSpec(bandwidth=0.0)


def test_ball_spec_validation():
    svgd.BallSpec(np.zeros(2), 0.1)
    svgd.BallSpec(np.zeros(2), 0.1, norm=2)
    with pytest.raises(ValueError):
        svgd.BallSpec(np.zeros(2), 0.0)
    with pytest.raises(ValueError):
        svgd.BallSpec(np.zeros(2), 0.1, norm=1)


def test_svgd_config_validation():
    svgd.SvgdConfig(n=1, iters=0)
    svgd.SvgdConfig(n=2, step=lambda l: 0.1)
    with pytest.raises(ValueError):
        svgd.SvgdConfig(n=0)
    with pytest.raises(ValueError):
        svgd.SvgdConfig(n=1, iters=-1)
    with pytest.raises(ValueError):
        svgd.SvgdConfig(n=1, step=0.0)


# ---------------------------------------------------------------------------
# kernel

def test_rbf_kernel_at_zero_distance():
    k, dk = svgd.rbf_kernel(np.array([1.0, 2.0]), np.array([1.0, 2.0]), 3.0)
    assert k == 1.0
    assert np.array_equal(dk, np.zeros(2))


def test_rbf_kernel_known_value_and_gradient():
    # ||x-y|| = 1, sigma = 1: k = e^{-1/2}; dk/dx = -(x-y)/sigma^2 * k
    k, dk = svgd.rbf_kernel(np.array([0.0]), np.array([1.0]), 1.0)
    assert k == pytest.approx(0.6065306597126334, abs=1e-15)
    assert dk[0] == pytest.approx(0.6065306597126334, abs=1e-15)


def test_rbf_kernel_distance_sigma_sqrt2():
    x = np.array([0.0, 0.0])
    y = np.array([1.0, 1.0])            # distance sqrt(2), sigma 1 -> e^{-1}
    k, _ = svgd.rbf_kernel(x, y, 1.0)
    assert k == pytest.approx(np.exp(-1.0), abs=1e-15)


def test_rbf_kernel_sigma_validation():
    with pytest.raises(ValueError):
        svgd.rbf_kernel(np.zeros(1), np.ones(1), 0.0)


def test_rbf_kernel_gradient_finite_difference():
    rng = np.random.default_rng(0)
    x = rng.normal(size=3)
    y = rng.normal(size=3)
    _, dk = svgd.rbf_kernel(x, y, 0.7)
    h = 1e-6
    for i in range(3):
        xp = x.copy(); xp[i] += h
        xm = x.copy(); xm[i] -= h
        fd = (svgd.rbf_kernel(xp, y, 0.7)[0] - svgd.rbf_kernel(xm, y, 0.7)[0]) / (2 * h)
        assert dk[i] == pytest.approx(fd, abs=1e-8)


# ---------------------------------------------------------------------------
# bandwidth heuristic

def test_median_bandwidth_two_points():
    # particles {0, 2}: med^2 = 4, sigma = sqrt(4 / (2 ln 3))
    sig = svgd.median_bandwidth(np.array([0.0, 2.0]))
    assert sig == pytest.approx(1.3492510712442198, abs=1e-12)


def test_median_bandwidth_identical_points_fallback():
    assert svgd.median_bandwidth(np.zeros((4, 2))) == 1.0


def test_median_bandwidth_needs_two():
    with pytest.raises(ValueError):
        svgd.median_bandwidth(np.zeros((1, 2)))


def test_median_bandwidth_scale_homogeneity():
    pts = np.random.default_rng(1).normal(size=(6, 2))
    assert svgd.median_bandwidth(2.5 * pts) == pytest.approx(
        2.5 * svgd.median_bandwidth(pts), rel=1e-12)


# ---------------------------------------------------------------------------
# direction

def double_loop_direction(parts, scores, sigma):
    """Textbook O(n^2) Stein direction used as the oracle."""
    n = parts.shape[0]
    out = np.zeros_like(parts)
    for i in range(n):
        for j in range(n):
            k, dk = svgd.rbf_kernel(parts[j], parts[i], sigma)
            out[i] += k * scores[j] + dk
    return out / n


def test_direction_single_particle_is_raw_score():
    score = lambda p: 3.0 * p
    parts = np.array([[1.0, -2.0]])
    d = svgd.svgd_direction(parts, score)
    assert np.array_equal(d, 3.0 * parts)


def test_direction_matches_double_loop_oracle():
    rng = np.random.default_rng(2)
    parts = rng.normal(size=(7, 3))
    scores = rng.normal(size=(7, 3))
    sigma = 0.9
    got = svgd.svgd_direction(parts, lambda p: scores,
                              kernel=svgd.KernelSpec(bandwidth=sigma))
    want = double_loop_direction(parts, scores, sigma)
    assert np.allclose(got, want, atol=1e-12)


def test_direction_median_heuristic_matches_oracle():
    rng = np.random.default_rng(3)
    parts = rng.normal(size=(5, 2))
    scores = rng.normal(size=(5, 2))
    sigma = svgd.median_bandwidth(parts)
    got = svgd.svgd_direction(parts, lambda p: scores)
    want = double_loop_direction(parts, scores, sigma)
    assert np.allclose(got, want, atol=1e-12)


def test_direction_pure_repulsion_sign():
    # zero scores: particles should push apart along the line joining them
    parts = np.array([[-1.0], [1.0]])
    d = svgd.svgd_direction(parts, lambda p: np.zeros_like(p),
                            kernel=svgd.KernelSpec(bandwidth=1.0))
    assert d[0, 0] < 0 and d[1, 0] > 0


def test_direction_one_dim_input_promoted():
    d = svgd.svgd_direction(np.array([-1.0, 1.0]),
                            lambda p: np.zeros_like(p),
                            kernel=svgd.KernelSpec(bandwidth=1.0))
    assert d.shape == (2, 1)


def test_direction_nonfinite_score_names_particle():
    parts = np.zeros((3, 2))

    def score(p):
        s = np.zeros_like(p)
        s[1, 0] = np.nan
        return s

    with pytest.raises(FloatingPointError, match="particle 1"):
        svgd.svgd_direction(parts, score)


def test_direction_permutation_equivariance():
    rng = np.random.default_rng(4)
    parts = rng.normal(size=(6, 2))
    scores = rng.normal(size=(6, 2))
    perm = rng.permutation(6)
    k = svgd.KernelSpec(bandwidth=0.8)
    d = svgd.svgd_direction(parts, lambda p: scores, kernel=k)
    dp = svgd.svgd_direction(parts[perm], lambda p: scores[perm], kernel=k)
    assert np.allclose(dp, d[perm], atol=1e-12)


# ---------------------------------------------------------------------------
# projection

def test_project_ball_inside_unchanged():
    ball = svgd.BallSpec(np.zeros(2), 1.0, norm=2)
    x = np.array([0.3, 0.4])
    assert np.array_equal(svgd.project_ball(x, ball), x)


def test_project_ball_inf_clamps_per_coordinate():
    ball = svgd.BallSpec(np.zeros(2), 1.0, norm=np.inf)
    out = svgd.project_ball(np.array([2.0, -0.5]), ball)
    assert np.array_equal(out, [1.0, -0.5])


def test_project_ball_l2_radial():
    ball = svgd.BallSpec(np.zeros(2), 1.0, norm=2)
    out = svgd.project_ball(np.array([3.0, 4.0]), ball)
    assert np.allclose(out, [0.6, 0.8], atol=1e-12)
    assert np.linalg.norm(out) <= 1.0          # never a ulp outside


def test_project_ball_l2_off_center():
    c = np.array([5.0, -2.0])
    ball = svgd.BallSpec(c, 0.5, norm=2)
    out = svgd.project_ball(c + np.array([3.0, 4.0]), ball)
    assert np.allclose(out - c, [0.3, 0.4], atol=1e-12)
    assert np.linalg.norm(out - c) <= 0.5


# ---------------------------------------------------------------------------
# projected SVGD runs

def test_projected_svgd_zero_iters_is_projected_init():
    ball = svgd.BallSpec(np.zeros(2), 0.2, norm=np.inf)
    cfg = svgd.SvgdConfig(n=4, iters=0)
    out = svgd.projected_svgd(lambda p: np.zeros_like(p), ball, cfg,
                              np.random.default_rng(5))
    assert out.particles.shape == (4, 2)
    assert np.all(np.abs(out.particles) <= 0.2)
    # init noise defaults to radius/2, so nothing needed clipping
    assert np.all(np.abs(out.particles) <= 0.1)


def test_projected_svgd_ball_invariant_every_iteration():
    radius = 0.1
    seen = []

    def score(parts):
        seen.append(parts.copy())
        return -parts        # log-density of a standard normal

    ball = svgd.BallSpec(np.full(2, 0.5), radius, norm=np.inf)
    cfg = svgd.SvgdConfig(n=5, iters=8, step=0.05)
    out = svgd.projected_svgd(score, ball, cfg, np.random.default_rng(6))
    assert len(seen) == 8
    for parts in seen:
        assert np.all(np.abs(parts - 0.5) <= radius + 1e-15)
    assert np.all(np.abs(out.particles - 0.5) <= radius)


def test_projected_svgd_deterministic_given_seed():
    ball = svgd.BallSpec(np.zeros(2), 0.5, norm=2)
    cfg = svgd.SvgdConfig(n=6, iters=10, step=0.01)
    outs = [svgd.projected_svgd(lambda p: -p, ball, cfg,
                                np.random.default_rng(7)).particles
            for _ in range(2)]
    assert np.array_equal(outs[0], outs[1])


def test_projected_svgd_callable_step_schedule():
    calls = []

    def step(l):
        calls.append(l)
        return 0.01

    ball = svgd.BallSpec(np.zeros(1), 1.0)
    cfg = svgd.SvgdConfig(n=2, iters=3, step=step)
    svgd.projected_svgd(lambda p: -p, ball, cfg, np.random.default_rng(8))
    assert calls == [0, 1, 2]


def test_projected_svgd_batch_rows_independent():
    # every anchor's particles stay inside that anchor's own ball
    anchors = np.array([[0.0, 0.0], [5.0, 5.0]])
    cfg = svgd.SvgdConfig(n=3, iters=5, step=0.02, init_noise=0.05)

    def score(parts):
        return -(parts - anchors[:, None, :])

    parts = svgd.projected_svgd_batch(anchors, score, 0.3, np.inf, cfg,
                                      np.random.default_rng(9))
    assert parts.shape == (2, 3, 2)
    assert np.all(np.abs(parts - anchors[:, None, :]) <= 0.3)


def test_projected_svgd_init_noise_override():
    ball = svgd.BallSpec(np.zeros(2), 1.0)
    cfg = svgd.SvgdConfig(n=50, iters=0, init_noise=0.01)
    out = svgd.projected_svgd(lambda p: np.zeros_like(p), ball, cfg,
                              np.random.default_rng(10))
    assert np.max(np.abs(out.particles)) <= 0.01


def test_projected_svgd_tracks_gaussian_spread():
    # wide inactive ball, N(0, 0.25) target: particles settle near the
    # mode with roughly the target's standard deviation
    ball = svgd.BallSpec(np.zeros(1), 5.0)
    cfg = svgd.SvgdConfig(n=20, iters=500, step=0.05, init_noise=3.0)
    out = svgd.projected_svgd(lambda p: -p / 0.25, ball, cfg,
                              np.random.default_rng(11))
    p = out.particles
    assert abs(float(p.mean())) < 0.2
    assert 0.3 < float(p.std()) < 0.7
