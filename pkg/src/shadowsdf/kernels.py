"""Hot loops with a compiled core and a numpy fallback.

The compiled module ``shadowsdf._kernels`` is used when it imports; set
``SHADOWSDF_PURE_PYTHON=1`` to force the numpy implementations.  Both sides
expose the same functions and are cross-checked in the test suite.

Analytic primitive table (one row per primitive, union = min over rows)::

    kind 0  sphere       cx cy cz r
    kind 1  plane        nx ny nz offset          (n . p = offset)
    kind 2  box          cx cy cz hx hy hz
    kind 3  bumpy plane  offset amp freq          (z = offset + amp sin(fx) sin(fy))
"""

import os

import numpy as np

PRIM_COLUMNS = 8
SPHERE, PLANE, BOX, BUMPY = 0, 1, 2, 3


# --------------------------------------------------------------------------
# numpy reference implementations

def py_softplus(x, beta=1.0):
    x = np.asarray(x)
    bx = x * beta
    return (np.maximum(bx, 0) + np.log1p(np.exp(-np.abs(bx)))) / beta


def py_sigmoid(x):
    x = np.asarray(x)
    return 0.5 * np.tanh(0.5 * x) + 0.5


def py_softplus_sigmoid(x, beta=1.0):
    """softplus(x, beta) and its derivative sigmoid(beta * x) in one pass."""
    x = np.asarray(x)
    bx = x * beta
    e = np.exp(-np.abs(bx))
    out = (np.maximum(bx, 0) + np.log1p(e)) / beta
    d = np.where(bx > 0, 1.0, e) / (1.0 + e)
    return out, d.astype(out.dtype, copy=False)


def py_sample_pdf(bins, weights, n_samples):
    """Deterministic inverse-CDF sampling, one row per ray.

    ``bins`` has K+1 edges per row, ``weights`` K nonnegative entries.  Rows
    with no mass fall back to uniform sampling.  Returns (N, n_samples)
    ascending sample positions.
    """
    bins = np.asarray(bins, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64) + 1e-5
    pdf = weights / weights.sum(axis=-1, keepdims=True)
    cdf = np.cumsum(pdf, axis=-1)
    cdf = np.concatenate([np.zeros_like(cdf[:, :1]), cdf], axis=-1)
    cdf[:, -1] = 1.0
    u = (np.arange(n_samples) + 0.5) / n_samples
    u = np.broadcast_to(u, (bins.shape[0], n_samples))
    idx = (cdf[:, None, :] <= u[:, :, None]).sum(axis=-1)
    below = np.clip(idx - 1, 0, cdf.shape[1] - 1)
    above = np.clip(idx, 0, cdf.shape[1] - 1)
    cdf_b = np.take_along_axis(cdf, below, -1)
    cdf_a = np.take_along_axis(cdf, above, -1)
    bin_b = np.take_along_axis(bins, below, -1)
    bin_a = np.take_along_axis(bins, above, -1)
    denom = cdf_a - cdf_b
    denom = np.where(denom < 1e-12, 1.0, denom)
    frac = (u - cdf_b) / denom
    return bin_b + frac * (bin_a - bin_b)


def py_analytic_sdf(prims, p):
    """Union SDF of the primitive table at points ``p`` (..., 3)."""
    p = np.asarray(p, dtype=np.float64)
    out = np.full(p.shape[:-1], np.inf)
    for row in np.asarray(prims, dtype=np.float64):
        kind = int(row[0])
        a = row[1:]
        if kind == SPHERE:
            d = np.linalg.norm(p - a[:3], axis=-1) - a[3]
        elif kind == PLANE:
            d = p @ a[:3] - a[3]
        elif kind == BOX:
            q = np.abs(p - a[:3]) - a[3:6]
            outside = np.linalg.norm(np.maximum(q, 0), axis=-1)
            inside = np.minimum(q.max(axis=-1), 0)
            d = outside + inside
        elif kind == BUMPY:
            off, amp, fr = a[0], a[1], a[2]
            h = off + amp * np.sin(fr * p[..., 0]) * np.sin(fr * p[..., 1])
            d = (p[..., 2] - h) / np.sqrt(1.0 + 2.0 * (amp * fr) ** 2)
        else:
            raise ValueError(f"unknown primitive kind {kind}")
        out = np.minimum(out, d)
    return out


def py_march_analytic(prims, origins, dirs, tmin, tmax, n_steps=4096, n_bisect=40, chunk=512):
    """First entry of each ray into the analytic union.

    Uniform ``n_steps`` sampling of [tmin, tmax] locates the first sample
    with negative distance; bisection refines the crossing.  Rays starting
    inside return ``tmin``; misses return ``nan``.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    n = len(origins)
    tmin = np.broadcast_to(np.asarray(tmin, dtype=np.float64), (n,))
    tmax = np.broadcast_to(np.asarray(tmax, dtype=np.float64), (n,))
    out = np.full(n, np.nan)
    steps = np.linspace(0.0, 1.0, n_steps)
    for s in range(0, n, chunk):
        o, d = origins[s:s + chunk], dirs[s:s + chunk]
        t0, t1 = tmin[s:s + chunk], tmax[s:s + chunk]
        m = len(o)
        found = np.full(m, -1)
        # scan in blocks so rays that hit early stop costing memory
        for b in range(0, n_steps, 256):
            todo = found < 0
            if not todo.any():
                break
            ts = t0[todo, None] + (t1 - t0)[todo, None] * steps[None, b:b + 256]
            f = py_analytic_sdf(prims, o[todo, None, :] + ts[..., None] * d[todo, None, :])
            neg = f < 0
            hit = neg.any(axis=1)
            first = np.argmax(neg, axis=1) + b
            idx = np.flatnonzero(todo)
            found[idx[hit]] = first[hit]
        res = np.full(m, np.nan)
        at_start = found == 0
        res[at_start] = t0[at_start]
        ok = found > 0
        if ok.any():
            lo = t0[ok] + (t1 - t0)[ok] * steps[found[ok] - 1]
            hi = t0[ok] + (t1 - t0)[ok] * steps[found[ok]]
            oo, dd = o[ok], d[ok]
            for _ in range(n_bisect):
                mid = 0.5 * (lo + hi)
                f = py_analytic_sdf(prims, oo + mid[:, None] * dd)
                inside = f < 0
                hi = np.where(inside, mid, hi)
                lo = np.where(inside, lo, mid)
            res[ok] = 0.5 * (lo + hi)
        out[s:s + chunk] = res
    return out


_PY = {
    "softplus": py_softplus,
    "sigmoid": py_sigmoid,
    "softplus_sigmoid": py_softplus_sigmoid,
    "sample_pdf": py_sample_pdf,
    "analytic_sdf": py_analytic_sdf,
    "march_analytic": py_march_analytic,
}


def _load_compiled():
    if os.environ.get("SHADOWSDF_PURE_PYTHON", "") not in ("", "0"):
        return None
    try:
        from . import _kernels
    except ImportError:
        return None
    return _kernels


_compiled = _load_compiled()
BACKEND = "cython" if _compiled is not None else "numpy"


def softplus(x, beta=1.0):
    x = np.asarray(x)
    if _compiled is not None and x.dtype in (np.float32, np.float64) and x.ndim > 0:
        return _compiled.softplus(np.ascontiguousarray(x), float(beta))
    return py_softplus(x, beta)


def softplus_sigmoid(x, beta=1.0):
    x = np.asarray(x)
    if _compiled is not None and x.dtype in (np.float32, np.float64) and x.ndim > 0:
        return _compiled.softplus_sigmoid(np.ascontiguousarray(x), float(beta))
    return py_softplus_sigmoid(x, beta)


def sigmoid(x):
    x = np.asarray(x)
    if _compiled is not None and x.dtype in (np.float32, np.float64) and x.ndim > 0:
        return _compiled.sigmoid(np.ascontiguousarray(x))
    return py_sigmoid(x)


def sample_pdf(bins, weights, n_samples):
    if _compiled is not None:
        return _compiled.sample_pdf(np.ascontiguousarray(bins, dtype=np.float64),
                                    np.ascontiguousarray(weights, dtype=np.float64),
                                    int(n_samples))
    return py_sample_pdf(bins, weights, n_samples)


def analytic_sdf(prims, p):
    p = np.asarray(p, dtype=np.float64)
    if _compiled is not None:
        flat = np.ascontiguousarray(p.reshape(-1, 3))
        return _compiled.analytic_sdf(_prims(prims), flat).reshape(p.shape[:-1])
    return py_analytic_sdf(prims, p)


def march_analytic(prims, origins, dirs, tmin, tmax, n_steps=4096, n_bisect=40):
    origins = np.ascontiguousarray(origins, dtype=np.float64)
    n = len(origins)
    if _compiled is not None:
        return _compiled.march_analytic(
            _prims(prims), origins, np.ascontiguousarray(dirs, dtype=np.float64),
            np.ascontiguousarray(np.broadcast_to(tmin, (n,)), dtype=np.float64),
            np.ascontiguousarray(np.broadcast_to(tmax, (n,)), dtype=np.float64),
            int(n_steps), int(n_bisect))
    return py_march_analytic(prims, origins, dirs, tmin, tmax, n_steps, n_bisect)


def _prims(prims):
    prims = np.asarray(prims, dtype=np.float64)
    if prims.ndim != 2 or prims.shape[1] != PRIM_COLUMNS:
        raise ValueError(f"primitive table must be (n, {PRIM_COLUMNS}), got {prims.shape}")
    return np.ascontiguousarray(prims)
