"""Camera-ray intersection, differentiable intersection points, surface walk.

All functions are batched: one row per ray.  Fields are duck-typed objects
with ``sdf(x)``; a :class:`~shadowsdf.fields.SceneField` additionally exposes
``object_sdf`` and ``ground`` so camera rays that miss the object fall back
to the known ground plane.

Cameras are duck-typed too: ``project(x)`` maps world points (array or Var)
to pixel coordinates, ``rays(uv)`` returns :class:`Rays` through pixel
coordinates and ``center`` is the camera position.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffengine as ad
from .fields import detached, sdf_gradient


@dataclass
class Rays:
    """Batch of rays ``o + t d`` restricted to ``near <= t <= far``."""

    origins: np.ndarray
    dirs: np.ndarray
    near: np.ndarray
    far: np.ndarray

    def __len__(self):
        return len(self.origins)

    def subset(self, idx):
        return Rays(self.origins[idx], self.dirs[idx], self.near[idx], self.far[idx])

    def at(self, t):
        return self.origins + np.asarray(t)[..., None] * self.dirs


def sphere_interval(origins, dirs, radius=1.0):
    """Entry/exit parameters of unit-direction rays with a centred sphere.

    Rays that miss get ``near = far = 0``.  ``near`` is clamped at 0.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    b = np.sum(origins * dirs, axis=-1)
    c = np.sum(origins * origins, axis=-1) - radius * radius
    disc = b * b - c
    hit = disc > 0
    root = np.sqrt(np.where(hit, disc, 0.0))
    near = np.maximum(-b - root, 0.0)
    far = np.maximum(-b + root, 0.0)
    near = np.where(hit, near, 0.0)
    far = np.where(hit, far, 0.0)
    return near, far


def bounded_rays(origins, dirs, radius=1.0):
    """Normalise directions and bound the rays by the scene sphere."""
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    dirs = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins, dirs = np.broadcast_arrays(origins, dirs)
    near, far = sphere_interval(origins, dirs, radius)
    return Rays(np.ascontiguousarray(origins), np.ascontiguousarray(dirs), near, far)


@dataclass
class Intersection:
    """First surface hit per ray.

    ``min_sdf``/``t_min_sdf`` record the smallest object distance seen
    among the marching samples; the surface walk uses them to seed rays
    that pass just beside the object.
    """

    x: np.ndarray
    t: np.ndarray
    hit_ground: np.ndarray
    valid: np.ndarray
    min_sdf: np.ndarray | None = None
    t_min_sdf: np.ndarray | None = None

    @property
    def hit_object(self):
        return self.valid & ~self.hit_ground

    def subset(self, idx):
        pick = lambda a: None if a is None else a[idx]
        return Intersection(self.x[idx], self.t[idx], self.hit_ground[idx], self.valid[idx],
                            pick(self.min_sdf), pick(self.t_min_sdf))


def _field_parts(field):
    # a ground with a closed-form intersection is handled analytically
    ground = getattr(field, "ground", None)
    if ground is None or not hasattr(ground, "intersect"):
        return field.sdf, None
    return field.object_sdf, ground


def _eval(sdf, pts):
    return np.asarray(ad.value_of(sdf(pts)), dtype=np.float64)


def ray_march(field, rays: Rays, n_steps=256, n_secant=8, tol=1e-4, block=32):
    """First sign change of the SDF along uniform samples, refined by secant.

    The object SDF is sampled at ``n_steps`` uniform positions of
    ``[near, far]`` (blocks of ``block`` samples; rays stop early once they
    have hit or passed the ground).  The bracket is refined by Illinois
    regula falsi, with bisection as a fallback until ``|f| < tol``.  Rays
    with no sign change intersect the ground plane when the field has one.
    """
    sdf, ground = _field_parts(field)
    n = len(rays)
    o, d = rays.origins, rays.dirs
    near, far = rays.near, rays.far
    t_ground = ground.intersect(o, d) if ground is not None else np.full(n, np.inf)
    dt = (far - near) / (n_steps - 1)
    limit = np.minimum(far, t_ground)

    found = np.zeros(n, dtype=bool)
    t_lo = np.zeros(n)
    f_lo = np.zeros(n)
    t_hi = np.zeros(n)
    f_hi = np.zeros(n)
    f_last = np.full(n, np.inf)
    min_f = np.full(n, np.inf)
    t_min = np.zeros(n)
    starts_inside = np.zeros(n, dtype=bool)

    for b in range(0, n_steps, block):
        ks = np.arange(b, min(b + block, n_steps))
        active = ~found & (far > near) & (near + dt * b <= limit + dt)
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        ts = near[idx, None] + dt[idx, None] * ks[None, :]
        pts = o[idx, None, :] + ts[..., None] * d[idx, None, :]
        f = _eval(sdf, pts.reshape(-1, 3)).reshape(ts.shape)
        # ignore samples past the ground so the seed search stays in front of it
        in_front = ts <= limit[idx, None]
        fm = np.where(in_front, f, np.inf)
        j = np.argmin(fm, axis=1)
        fj = fm[np.arange(len(idx)), j]
        better = fj < min_f[idx]
        min_f[idx[better]] = fj[better]
        t_min[idx[better]] = ts[better, j[better]]

        prev = np.concatenate([f_last[idx, None], f[:, :-1]], axis=1)
        cross = (f < 0) & (prev >= 0)
        inside0 = (b == 0) & (f[:, 0] < 0)
        hit = cross.any(axis=1) | inside0
        first = np.argmax(cross, axis=1)
        rows = np.flatnonzero(hit)
        if rows.size:
            k = first[rows]
            gi = idx[rows]
            found[gi] = True
            starts_inside[gi] = inside0[rows]
            t_hi[gi] = ts[rows, k]
            f_hi[gi] = f[rows, k]
            t_lo[gi] = ts[rows, k] - dt[gi]
            f_lo[gi] = prev[rows, k]
        f_last[idx] = f[:, -1]

    t_obj = np.full(n, np.inf)
    t_obj[starts_inside] = near[starts_inside]
    ref = np.flatnonzero(found & ~starts_inside)
    if ref.size:
        t_obj[ref] = _refine(sdf, o[ref], d[ref], t_lo[ref], f_lo[ref], t_hi[ref], f_hi[ref],
                             n_secant, tol)

    hit_obj = np.isfinite(t_obj) & (t_obj <= t_ground)
    hit_g = ~hit_obj & np.isfinite(t_ground)
    t = np.where(hit_obj, t_obj, np.where(hit_g, t_ground, np.nan))
    valid = hit_obj | hit_g
    x = o + np.where(valid, t, 0.0)[:, None] * d
    return Intersection(x, t, hit_g, valid, min_f, t_min)


def _refine(sdf, o, d, a, fa, b, fb, n_secant, tol, max_bisect=40):
    # Illinois variant of regula falsi keeps the bracket [a, b] with fa >= 0 > fb
    side = np.zeros(len(a), dtype=int)
    t = b.copy()
    ft = fb.copy()
    for _ in range(n_secant):
        denom = fa - fb
        t = np.where(np.abs(denom) > 1e-300, (a * (-fb) + b * fa) / np.where(denom == 0, 1, denom),
                     0.5 * (a + b))
        ft = _eval(sdf, o + t[:, None] * d)
        pos = ft >= 0
        # replace the endpoint with the same sign; halve the stale one
        a = np.where(pos, t, a)
        fa_new = np.where(pos, ft, fa)
        b = np.where(pos, b, t)
        fb_new = np.where(pos, fb, ft)
        fb_new = np.where(pos & (side == 1), fb_new * 0.5, fb_new)
        fa_new = np.where(~pos & (side == -1), fa_new * 0.5, fa_new)
        side = np.where(pos, 1, -1)
        fa, fb = fa_new, fb_new
    # bisection fallback for the rare rays that have not converged
    todo = np.abs(ft) >= tol
    for _ in range(max_bisect):
        if not todo.any():
            break
        m = 0.5 * (a + b)
        fm = _eval(sdf, o + m[:, None] * d)
        pos = fm >= 0
        a = np.where(todo & pos, m, a)
        b = np.where(todo & ~pos, m, b)
        t = np.where(todo, m, t)
        ft = np.where(todo, fm, ft)
        todo = todo & (np.abs(fm) >= tol)
    return t


# --------------------------------------------------------------------------
# differentiable intersection

class ClampCounter:
    """Counts near-tangent denominators that had to be clamped."""

    def __init__(self):
        self.count = 0


TANGENT_CLAMP = ClampCounter()


def differentiable_intersection(field, dirs, x, eps=1e-4, counter=TANGENT_CLAMP, n=None):
    """x_hat = x - v / (n . v) * f(x).

    ``x`` and the normal are constants; only ``f(x)`` is evaluated through
    ``field`` so the result carries parameter gradients while its value
    equals ``x`` up to the marching residual.  Denominators with
    ``|n . v| <= eps`` are clamped to ``eps`` with the sign kept.  A
    precomputed unit normal ``n`` may be passed in.
    """
    x = np.asarray(x, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    if n is None:
        _, g = sdf_gradient(detached(field), x)
        n = g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)
    nv = np.sum(n * dirs, axis=-1)
    small = np.abs(nv) <= eps
    counter.count += int(small.sum())
    nv = np.where(small, np.where(nv < 0, -eps, eps), nv)
    f = field.sdf(x)
    step = ad.mul(ad.reshape(f, f.shape + (1,)) if ad.is_var(f) else f[..., None],
                  dirs / nv[..., None])
    return ad.sub(x, step)


def project_to_surface(field, p, iters=3):
    """Newton projection ``p <- p - f grad f / |grad f|^2`` onto f = 0."""
    p = np.array(p, dtype=np.float64)
    for _ in range(iters):
        f, g = sdf_gradient(field, p)
        p = p - (f / np.maximum(np.sum(g * g, axis=-1), 1e-12))[:, None] * g
    return p


# --------------------------------------------------------------------------
# surface walk and boundary pixels

@dataclass
class BoundaryInfo:
    """Silhouette pixels and their sub-pixel geometry.

    For rows with ``is_boundary``: ``point`` is the boundary surface point
    (normal perpendicular to the view ray), ``normal`` its unit normal,
    ``m`` the unit image-space direction pointing from the near to the far
    region, ``corner``/``size`` the pixel square in image coordinates and
    ``x_near``/``x_far`` the intersections of the two sub-pixel rays.
    """

    is_boundary: np.ndarray
    point: np.ndarray
    normal: np.ndarray
    m: np.ndarray
    corner: np.ndarray
    size: np.ndarray
    x_near: Intersection
    x_far: Intersection
    near_rays: Rays
    far_rays: Rays

    def w_value(self, camera):
        uv = camera.project(self.point)
        return np.asarray(coverage_fraction(uv, self.m, self.corner, self.size))


def coverage_fraction(uv, m, corner, size):
    """Area fraction of a square pixel on the near side of an edge line.

    The edge passes through image point ``uv`` with unit normal ``m``
    pointing into the far region; the pixel is ``corner + [0, size]^2``.
    ``uv`` may be a Var; the result is then differentiable in it.
    """
    m = np.asarray(m, dtype=np.float64)
    size = np.asarray(size, dtype=np.float64)
    a = np.abs(m[..., 0])
    b = np.abs(m[..., 1])
    p = np.maximum(np.minimum(a, b), 1e-9)
    q = np.maximum(np.maximum(a, b), 1e-9)
    # offset of the edge from the pixel corner with the smallest m . q
    lowest = np.minimum(m[..., 0], 0.0) + np.minimum(m[..., 1], 0.0)
    rel = ad.div(ad.sub(uv, corner), size[..., None])
    s = ad.sub(ad.sum(ad.mul(rel, m), axis=-1), lowest)
    sv = np.asarray(ad.value_of(s))
    low = sv <= p
    high = sv >= q
    s_lo = ad.where(low, s, p)
    s_mid = ad.where(~low & ~high, s, 0.5 * (p + q))
    s_hi = ad.where(high, s, q)
    f_lo = ad.div(ad.square(s_lo), 2 * p * q)
    f_mid = ad.div(ad.sub(s_mid, 0.5 * p), q)
    f_hi = ad.sub(1.0, ad.div(ad.square(ad.sub(p + q, s_hi)), 2 * p * q))
    area = ad.where(low, f_lo, ad.where(high, f_hi, f_mid))
    outside_lo = sv <= 0
    outside_hi = sv >= p + q
    area = ad.where(outside_lo, 0.0, ad.where(outside_hi, 1.0, area))
    return area


def _view_dirs(camera, p):
    v = p - np.asarray(camera.center)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def surface_walk(field, camera, rays: Rays, hit: Intersection, pixel_uv, pixel_size,
                 n_steps=16, step=None, step_scale=0.25, perp_tol=0.01, diverge_tol=1e-2,
                 n_bisect=8, reach_scale=1.5):
    """Locate silhouette points inside each pixel footprint.

    ``pixel_uv`` holds the pixel centres in image coordinates and
    ``pixel_size`` the footprint edge length in the same units.  Walks
    start at object hits, or, for rays that pass within one footprint of
    the object, at the projection of the closest marching sample onto the
    surface.  Each move goes ``step`` along the tangent direction that
    decreases ``|n . v|`` and is followed by one Newton re-projection; a
    sign flip of ``n . v`` is refined by bisection.  ``step=None`` uses
    ``max(2e-3, step_scale * footprint)`` where footprint is the pixel's
    world-space width at the hit depth.
    """
    n = len(rays)
    pixel_uv = np.asarray(pixel_uv, dtype=np.float64)
    size = np.broadcast_to(np.asarray(pixel_size, dtype=np.float64), (n,)).copy()
    corner = pixel_uv - 0.5 * size[:, None]
    fx = float(getattr(camera, "fx", 1.0))
    depth = np.where(hit.valid, hit.t, np.nan_to_num(hit.t_min_sdf, nan=1.0)
                     if hit.t_min_sdf is not None else 1.0)
    depth = np.where(np.isfinite(depth), depth, 1.0)
    footprint = size * depth / fx

    seeds = np.zeros((n, 3))
    use = hit.hit_object.copy()
    seeds[use] = hit.x[use]
    if hit.min_sdf is not None:
        near_miss = ~use & (hit.min_sdf < footprint) & np.isfinite(hit.min_sdf)
        if near_miss.any():
            nm = np.flatnonzero(near_miss)
            p0 = rays.origins[nm] + hit.t_min_sdf[nm, None] * rays.dirs[nm]
            p0 = project_to_surface(field, p0, iters=4)
            f0 = np.asarray(ad.value_of(field.sdf(p0)))
            ok = np.abs(f0) < 1e-3
            seeds[nm[ok]] = p0[ok]
            use[nm[ok]] = True

    empty = _empty_boundary(n, corner, size)
    idx = np.flatnonzero(use)
    if idx.size == 0:
        return empty

    if step is None:
        steps = np.maximum(2e-3, step_scale * footprint[idx])
    else:
        steps = np.full(idx.size, float(step))
    pts, nrm, ok = _walk(field, camera, seeds[idx], steps, n_steps, perp_tol, diverge_tol,
                         n_bisect)

    # the silhouette edge through the boundary point must cross the footprint
    uv = np.asarray(camera.project(pts))
    m = _image_normal(camera, pts, nrm)
    ok &= np.all(np.isfinite(m), axis=-1)
    m = np.where(np.isfinite(m), m, np.array([1.0, 0.0]))
    reach = np.all(np.abs(uv - pixel_uv[idx]) <= reach_scale * size[idx, None], axis=-1)
    cov = np.asarray(coverage_fraction(uv, m, corner[idx], size[idx]))
    ok &= reach & (cov > 0) & (cov < 1)

    # sub-pixel rays through the centroids of the near and far regions
    uv_near, uv_far = _region_centroids(uv, m, corner[idx], size[idx])
    r_near = camera.rays(uv_near)
    r_far = camera.rays(uv_far)
    h_near = ray_march(field, r_near)
    h_far = ray_march(field, r_far)
    ok &= h_near.hit_object & h_far.valid & (h_near.t < h_far.t)

    info = empty
    sel = idx[ok]
    info.is_boundary[sel] = True
    info.point[sel] = pts[ok]
    info.normal[sel] = nrm[ok]
    info.m[sel] = m[ok]
    for dst, src in ((info.x_near, h_near), (info.x_far, h_far)):
        dst.x[sel] = src.x[ok]
        dst.t[sel] = src.t[ok]
        dst.hit_ground[sel] = src.hit_ground[ok]
        dst.valid[sel] = src.valid[ok]
    for dst, src in ((info.near_rays, r_near), (info.far_rays, r_far)):
        dst.origins[sel] = src.origins[ok]
        dst.dirs[sel] = src.dirs[ok]
        dst.near[sel] = src.near[ok]
        dst.far[sel] = src.far[ok]
    return info


def _region_centroids(uv, m, corner, size, k=8):
    # approximate centroids of the two sides of the edge on a k x k grid;
    # an empty side falls back to its extreme pixel corner
    g = (np.arange(k) + 0.5) / k
    gu, gv = np.meshgrid(g, g)
    grid = np.stack([gu.ravel(), gv.ravel()], axis=-1)
    pts = corner[:, None, :] + grid[None] * size[:, None, None]
    side = np.sum((pts - uv[:, None, :]) * m[:, None, :], axis=-1)
    far = side > 0
    near = ~far
    cu = np.array([[0, 0], [1, 0], [0, 1], [1, 1]], dtype=float)
    corners = corner[:, None, :] + cu[None] * size[:, None, None]
    cside = np.sum((corners - uv[:, None, :]) * m[:, None, :], axis=-1)
    rows = np.arange(len(uv))
    c_far = corners[rows, np.argmax(cside, axis=1)]
    c_near = corners[rows, np.argmin(cside, axis=1)]
    nf = far.sum(axis=1)
    nn = near.sum(axis=1)
    mean_far = np.sum(pts * far[..., None], axis=1) / np.maximum(nf, 1)[:, None]
    mean_near = np.sum(pts * near[..., None], axis=1) / np.maximum(nn, 1)[:, None]
    uv_far = np.where((nf > 0)[:, None], mean_far, c_far)
    uv_near = np.where((nn > 0)[:, None], mean_near, c_near)
    # pull the corner fallbacks slightly inside the pixel
    inset = 1e-3 * size[:, None]
    lo, hi = corner + inset, corner + size[:, None] - inset
    return np.clip(uv_near, lo, hi), np.clip(uv_far, lo, hi)


def _empty_boundary(n, corner, size):
    def blank():
        return Intersection(np.zeros((n, 3)), np.full(n, np.nan), np.zeros(n, bool),
                            np.zeros(n, bool))

    def blank_rays():
        return Rays(np.zeros((n, 3)), np.tile([0.0, 0.0, 1.0], (n, 1)), np.zeros(n), np.zeros(n))

    return BoundaryInfo(np.zeros(n, bool), np.zeros((n, 3)), np.zeros((n, 3)),
                        np.tile([1.0, 0.0], (n, 1)), corner, size, blank(), blank(),
                        blank_rays(), blank_rays())


def _normals(field, p):
    f, g = sdf_gradient(field, p)
    gn = np.linalg.norm(g, axis=-1, keepdims=True)
    return f, g / np.maximum(gn, 1e-12), g


def _walk(field, camera, p, steps, n_steps, perp_tol, diverge_tol, n_bisect):
    k = len(p)
    p = p.copy()
    f, nrm, _ = _normals(field, p)
    c = np.sum(nrm * _view_dirs(camera, p), axis=-1)
    done = np.abs(c) < perp_tol
    alive = np.abs(f) <= diverge_tol
    prev_p = p.copy()
    prev_c = c.copy()
    flipped = np.zeros(k, dtype=bool)
    for _ in range(n_steps):
        act = np.flatnonzero(alive & ~done & ~flipped)
        if act.size == 0:
            break
        pa, na, ca = p[act], nrm[act], c[act]
        v = _view_dirs(camera, pa)
        vt = v - np.sum(v * na, axis=-1, keepdims=True) * na
        vt /= np.maximum(np.linalg.norm(vt, axis=-1, keepdims=True), 1e-12)
        dirn = -np.sign(ca)[:, None] * vt
        q = pa + steps[act, None] * dirn
        fq, _, gq = _normals(field, q)
        q = q - (fq / np.maximum(np.sum(gq * gq, axis=-1), 1e-12))[:, None] * gq
        fq, nq, _ = _normals(field, q)
        cq = np.sum(nq * _view_dirs(camera, q), axis=-1)
        prev_p[act], prev_c[act] = pa, ca
        p[act], nrm[act], c[act], f[act] = q, nq, cq, fq
        alive[act] &= np.abs(fq) <= diverge_tol
        done[act] |= np.abs(cq) < perp_tol
        flipped[act] |= (np.sign(cq) != np.sign(ca)) & ~done[act]

    # bisect the bracket around a sign flip of n . v
    bi = np.flatnonzero(flipped & alive & ~done)
    if bi.size:
        a, b = prev_p[bi], p[bi]
        ca = prev_c[bi]
        for _ in range(n_bisect):
            mid = project_to_surface(field, 0.5 * (a + b), iters=2)
            _, nm, _ = _normals(field, mid)
            cm = np.sum(nm * _view_dirs(camera, mid), axis=-1)
            same = np.sign(cm) == np.sign(ca)
            a = np.where(same[:, None], mid, a)
            b = np.where(same[:, None], b, mid)
        mid = project_to_surface(field, 0.5 * (a + b), iters=2)
        fm, nm, _ = _normals(field, mid)
        p[bi], nrm[bi], f[bi] = mid, nm, fm
        alive[bi] &= np.abs(fm) <= diverge_tol
        done[bi] = True
    return p, nrm, done & alive


def _image_normal(camera, p, n, h=1e-4):
    # image-space direction in which the surface normal projects
    u0 = np.asarray(camera.project(p))
    u1 = np.asarray(camera.project(p + h * n))
    m = u1 - u0
    return m / np.linalg.norm(m, axis=-1, keepdims=True)


def boundary_weight(field, camera, info: BoundaryInfo, rows=None, grad=None):
    """Differentiable near-region area fraction ``w`` of boundary pixels.

    The boundary point moves with the field along its normal,
    ``b_hat = b - grad f * f(b) / |grad f|^2`` (the silhouette analogue of
    the differentiable intersection, whose view-ray form is singular there),
    and its image projection sets the edge offset inside the pixel.
    ``grad`` optionally supplies the (constant) SDF gradient at the points.
    """
    rows = np.flatnonzero(info.is_boundary) if rows is None else np.asarray(rows)
    b = info.point[rows]
    if grad is None:
        _, g = sdf_gradient(detached(field), b)
    else:
        g = grad
    f = field.sdf(b)
    scale = g / np.maximum(np.sum(g * g, axis=-1, keepdims=True), 1e-12)
    fcol = ad.reshape(f, f.shape + (1,)) if ad.is_var(f) else f[..., None]
    b_hat = ad.sub(b, ad.mul(fcol, scale))
    uv = camera.project(b_hat)
    return coverage_fraction(uv, info.m[rows], info.corner[rows], info.size[rows])
