"""Timing comparison of the two kernel backends.

Runs each hot kernel through the dispatched implementation (numba when
available) and through the pure-numpy twin, reports wall times and the
maximum deviation between the two results.  Usage:

    python benchmarks/bench_backends.py [--repeat N]

Set GLOT_NUMBA=0 to force the numpy path for the dispatched column too.
"""

import argparse
import time

import numpy as np

from glotdr import backend


def best_of(fn, repeat):
    fn()                        # warm-up (JIT compilation, caches)
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def deviation(a, b):
    return float(np.max(np.abs(np.asarray(a, dtype=np.float64)
                               - np.asarray(b, dtype=np.float64))))


def bench_pairwise(rng):
    x = rng.normal(size=(512, 32))
    y = rng.normal(size=(384, 32))
    return (lambda: backend.pairwise_sq_dists(x, y),
            lambda: backend._pairwise_sq_dists_np(x, y))


def bench_directions(rng):
    parts = rng.normal(size=(32, 64, 16))
    scores = rng.normal(size=(32, 64, 16))
    sigmas = rng.uniform(0.5, 2.0, 32)
    return (lambda: backend.svgd_directions(parts, scores, sigmas),
            lambda: backend._svgd_directions_np(parts, scores, sigmas))


def bench_sinkhorn(rng):
    n = 64
    loga = np.log(rng.dirichlet(np.ones(n)))
    logb = np.log(rng.dirichlet(np.ones(n)))
    C = rng.uniform(0.0, 1.0, (n, n))
    args = (loga, logb, C, 0.05, 1e-9, 10000)
    return (lambda: backend.sinkhorn_potentials(*args)[:2],
            lambda: backend._sinkhorn_potentials_np(*args)[:2])


def bench_project(rng):
    v = rng.normal(scale=2.0, size=4096)
    return (lambda: backend.project_simplex(v),
            lambda: backend._project_simplex_np(v))


def bench_ascent(rng):
    r = rng.uniform(-1.0, 1.0, 512)
    return (lambda: backend.simplex_entropy_ascent(r, 10.0),
            lambda: backend._simplex_entropy_ascent_np(r, 10.0, 1.0,
                                                       200000, 1e-14))


BENCHES = [
    ("pairwise_sq_dists (512x384, d=32)", bench_pairwise),
    ("svgd_directions (B=32, n=64, d=16)", bench_directions),
    ("sinkhorn_potentials (64x64, eps=0.05)", bench_sinkhorn),
    ("project_simplex (n=4096)", bench_project),
    ("simplex_entropy_ascent (m=512)", bench_ascent),
]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5,
                    help="timed repetitions per kernel (best is reported)")
    args = ap.parse_args()

    print(f"dispatched backend: {backend.active_backend()}")
    header = f"{'kernel':<40} {'dispatched':>11} {'numpy':>11} " \
             f"{'speedup':>8} {'max dev':>9}"
    print(header)
    print("-" * len(header))
    for name, make in BENCHES:
        fast, ref = make(np.random.default_rng(0))
        t_fast = best_of(fast, args.repeat)
        t_ref = best_of(ref, args.repeat)
        dev = max(deviation(a, b) for a, b in zip(np.atleast_1d(fast()),
                                                  np.atleast_1d(ref())))
        print(f"{name:<40} {t_fast * 1e3:>9.2f}ms {t_ref * 1e3:>9.2f}ms "
              f"{t_ref / t_fast:>7.1f}x {dev:>9.1e}")


if __name__ == "__main__":
    main()
