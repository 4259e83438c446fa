"""Per-pixel rendering: camera rays -> intersections -> boundaries -> shadow rays.

This is the forward model shared by training, evaluation and relighting.
With a field whose parameters are Vars the returned pixel values are Vars
differentiable in those parameters; with plain arrays everything is numpy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffengine as ad
from .fields import detached, normal, sdf_gradient
from .raycast import (BoundaryInfo, Intersection, boundary_weight, differentiable_intersection,
                      ray_march, surface_walk)
from .shading import render_outgoing
from .shadowrender import LightBatch, incoming_radiance


@dataclass
class RenderOptions:
    boundary: bool = True
    diff_intersection: bool = True
    n_uniform: int = 80
    n_importance: int = 64
    walk_step: float | None = None
    sharpness: float | None = None


@dataclass
class PixelRender:
    value: object
    valid: np.ndarray
    hit: Intersection
    boundary: BoundaryInfo | None
    w: object = None


def _gather_lights(lights, slot, owner):
    return lights[slot].subset(owner)


def render_pixels(field, camera, uv, pixel_size, lights, mode="shadow", material=None,
                  options: RenderOptions | None = None, tape=None, frozen=None):
    """Render pixels centred at ``uv`` with footprint ``pixel_size``.

    ``lights`` is a list of :class:`LightBatch` (one per light slot, one row
    per pixel); contributions of all slots are summed.  ``mode`` is
    ``"shadow"`` (incoming radiance, no falloff) or ``"rgb"`` (outgoing
    radiance through ``material``, an object with ``forward(x, n, feature)``).
    ``tape`` is required for differentiable RGB rendering (normals use
    gradient-of-gradient).

    ``frozen`` is an optional dict caching the non-differentiable choices
    (marched hits, boundary walks, shadow sample positions).  An empty dict
    is filled; a filled one is reused, so repeated calls with perturbed
    parameters evaluate one fixed smooth surrogate.
    """
    opt = options or RenderOptions()
    uv = np.asarray(uv, dtype=np.float64)
    n = len(uv)
    if isinstance(lights, LightBatch):
        lights = [lights]
    if frozen is not None and "hit" in frozen:
        rays, hit, info = frozen["rays"], frozen["hit"], frozen["info"]
    else:
        fd = detached(field)
        rays = camera.rays(uv)
        hit = ray_march(fd, rays)
        info = None
        if opt.boundary:
            info = surface_walk(fd, camera, rays, hit, uv, pixel_size, step=opt.walk_step)
        if frozen is not None:
            frozen.update(rays=rays, hit=hit, info=info)
    if info is not None:
        is_b = info.is_boundary
    else:
        is_b = np.zeros(n, dtype=bool)

    center = np.flatnonzero(hit.valid & ~is_b)
    bnd = np.flatnonzero(is_b)
    xs = [hit.x[center]]
    vs = [rays.dirs[center]]
    owner = [center]
    if bnd.size:
        xs += [info.x_near.x[bnd], info.x_far.x[bnd]]
        vs += [info.near_rays.dirs[bnd], info.far_rays.dirs[bnd]]
        owner += [bnd, bnd]
    X = np.concatenate(xs)
    V = np.concatenate(vs)
    own = np.concatenate(owner)
    valid = hit.valid | is_b
    if len(X) == 0:
        zero = np.zeros(n) if mode == "shadow" else np.zeros((n, 3))
        return PixelRender(zero, valid, hit, info)

    if opt.diff_intersection:
        if frozen is not None and "n_hit" not in frozen:
            _, g = sdf_gradient(detached(field), X)
            frozen["n_hit"] = g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)
        xh = differentiable_intersection(field, V, X,
                                         n=None if frozen is None else frozen["n_hit"])
    else:
        xh = X
    s = field.sharpness() if opt.sharpness is None else opt.sharpness

    if mode == "rgb":
        nrm = normal(field, xh if ad.is_var(xh) else X, tape=tape,
                     create_graph=tape is not None) if tape is not None else normal(field, X)
        obj = getattr(field, "obj", field)
        feat = obj.sdf_feature(xh)[1] if hasattr(obj, "sdf_feature") else None
        albedo, y = material.forward(xh, nrm, feat)

    total = None
    for slot in range(len(lights)):
        lb = _gather_lights(lights, slot, own)
        key = ("t", slot)
        c_in, smp = incoming_radiance(field, xh, lb, s=s, n_uniform=opt.n_uniform,
                                      n_importance=opt.n_importance, falloff=(mode == "rgb"),
                                      return_samples=True,
                                      t_samples=None if frozen is None else frozen.get(key))
        if frozen is not None:
            frozen[key] = smp.t
        if mode == "rgb":
            l, _ = lb.at(xh, falloff=True)
            c = render_outgoing(albedo, y, nrm, V, l, c_in)
        else:
            c = c_in
        total = c if total is None else ad.add(total, c)

    # scatter point values back to pixels
    m_c = len(center)
    m_b = len(bnd)
    pad_shape = (1,) + tuple(np.shape(ad.value_of(total))[1:])
    vals = ad.concatenate([total, np.zeros(pad_shape)], axis=0)
    dummy = len(X)
    ic = np.full(n, dummy)
    ic[center] = np.arange(m_c)
    out_c = vals[ic]
    if m_b == 0:
        return PixelRender(out_c, valid, hit, info)
    i_near = np.full(n, dummy)
    i_far = np.full(n, dummy)
    i_near[bnd] = m_c + np.arange(m_b)
    i_far[bnd] = m_c + m_b + np.arange(m_b)
    if frozen is not None and "g_bnd" not in frozen:
        frozen["g_bnd"] = sdf_gradient(detached(field), info.point[bnd])[1]
    w_b = boundary_weight(field, camera, info, bnd,
                          grad=None if frozen is None else frozen["g_bnd"])
    w_ext = ad.concatenate([w_b, np.zeros(1)], axis=0)
    iw = np.full(n, m_b)
    iw[bnd] = np.arange(m_b)
    w = w_ext[iw]
    if mode == "rgb":
        w_col = ad.reshape(w, (n, 1)) if ad.is_var(w) else np.asarray(w)[:, None]
        mask = is_b[:, None]
    else:
        w_col, mask = w, is_b
    blend = ad.add(ad.mul(w_col, vals[i_near]), ad.mul(ad.sub(1.0, w_col), vals[i_far]))
    out = ad.where(mask, blend, out_c)
    return PixelRender(out, valid, hit, info, w)


def render_image(field, camera, lights, mode="shadow", material=None, level=1, chunk=1024,
                 options: RenderOptions | None = None):
    """Render a full raster (no gradients) in chunks of pixels."""
    uv = camera.pixel_centers(level)
    w, h = camera.width // level, camera.height // level
    if not isinstance(lights, (list, tuple)):
        lights = [lights]
    out = []
    masks = []
    fd = detached(field)
    for s in range(0, len(uv), chunk):
        part = uv[s:s + chunk]
        lb = [LightBatch.gather([lt], np.zeros(len(part), dtype=int)) for lt in lights]
        r = render_pixels(fd, camera, part, float(level), lb, mode, material, options)
        out.append(np.asarray(r.value))
        masks.append(r.valid)
    img = np.concatenate(out)
    valid = np.concatenate(masks)
    shape = (h, w) if mode == "shadow" else (h, w, 3)
    return img.reshape(shape), valid.reshape(h, w)
