"""Time the compiled kernels against their numpy fallbacks.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Each row reports the best-of-N wall time of both implementations on the
same inputs, the speedup, and the max absolute difference of the outputs.
"""

import argparse
import time

import numpy as np

from shadowsdf import kernels


def _best(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def _cases(rng):
    x = rng.normal(scale=5.0, size=2_000_000)
    bins = np.sort(rng.uniform(0, 2, size=(8192, 81)), axis=1)
    weights = rng.uniform(size=(8192, 80))
    prims = np.array([[kernels.SPHERE, 0, 0, -0.1, 0.3, 0, 0, 0],
                      [kernels.BOX, 0.4, 0.2, -0.25, 0.1, 0.1, 0.15, 0],
                      [kernels.PLANE, 0, 0, 1, -0.4, 0, 0, 0]], dtype=np.float64)
    pts = rng.uniform(-1, 1, size=(500_000, 3))
    o = np.tile([0.0, -1.8, 1.3], (4096, 1))
    d = rng.normal(size=(4096, 3)) * 0.2 + np.array([0.0, 0.8, -0.6])
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    c = kernels._compiled
    return [
        ("softplus (2M)", lambda: c.softplus(x, 1.0), lambda: kernels.py_softplus(x)),
        ("softplus+sigmoid (2M)", lambda: c.softplus_sigmoid(x, 1.0)[0],
         lambda: kernels.py_softplus_sigmoid(x)[0]),
        ("sample_pdf (8192x64)", lambda: c.sample_pdf(bins, weights, 64),
         lambda: kernels.py_sample_pdf(bins, weights, 64)),
        ("analytic_sdf (500k)", lambda: c.analytic_sdf(prims, pts),
         lambda: kernels.py_analytic_sdf(prims, pts)),
        ("march_analytic (4096 rays)",
         lambda: c.march_analytic(prims, o, d, np.zeros(4096), np.full(4096, 6.0), 1024, 40),
         lambda: kernels.py_march_analytic(prims, o, d, 0.0, 6.0, 1024, 40)),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if kernels._compiled is None:
        raise SystemExit("compiled kernels are not built; run `python setup.py build_ext --inplace`")
    rng = np.random.default_rng(0)
    print(f"{'kernel':28s} {'cython ms':>10s} {'numpy ms':>10s} {'speedup':>8s} {'max |diff|':>11s}")
    for name, fast, slow in _cases(rng):
        tf, a = _best(fast, args.repeat)
        ts, b = _best(slow, args.repeat)
        a, b = np.asarray(a), np.asarray(b)
        fin = np.isfinite(a) & np.isfinite(b)
        diff = float(np.max(np.abs(a[fin] - b[fin]))) if fin.any() else 0.0
        print(f"{name:28s} {tf * 1e3:10.1f} {ts * 1e3:10.1f} {ts / tf:8.1f} {diff:11.2e}")


if __name__ == "__main__":
    main()
