"""Outgoing radiance with a spherical-Gaussian specular basis, RGB and total losses."""

from __future__ import annotations

import numpy as np

from . import diffengine as ad

N_LOBES = 9
SHININESS = np.geomspace(1.0, 512.0, N_LOBES)


class MixedSupervisionError(ValueError):
    """A batch mixed binary shadow and RGB supervision."""


def sg_basis(h, n, kappa=SHININESS):
    """D_k(h, n) = exp(kappa_k (h . n - 1)) for every lobe, shape (..., 9)."""
    hn = ad.dot(h, n, keepdims=True)
    return ad.exp(ad.mul(ad.sub(hn, 1.0), kappa))


def half_vector(l, v):
    """Unit bisector of the light direction ``l`` and the view direction ``-v``.

    Returns (h, ok); ``ok`` is False where ``l = v`` leaves h undefined, and
    h is set to an arbitrary unit vector there (callers zero the specular).
    """
    s = ad.sub(l, v)
    nrm = ad.norm(s, axis=-1, keepdims=True)
    ok = np.asarray(ad.value_of(nrm))[..., 0] > 1e-9
    safe = ad.where(ok[..., None], nrm, 1.0)
    h = ad.div(s, safe)
    h = ad.where(ok[..., None], h, np.array([0.0, 0.0, 1.0]))
    return h, ok


def specular(y, h, n, kappa=SHININESS):
    """rho_s[c] = sum_k y[c, k] D_k(h, n); ``y`` is (..., 27) laid out channel-major."""
    shape = ad.value_of(y).shape[:-1]
    yc = ad.reshape(y, shape + (3, len(kappa)))
    d = sg_basis(h, n, kappa)
    dk = ad.reshape(d, shape + (1, len(kappa)))
    return ad.sum(ad.mul(yc, dk), axis=-1)


def render_outgoing(albedo, y, n, v, l, c_in):
    """C = (rho_d + rho_s) * C_in * max(l . n, 0), per channel.

    ``v`` is the camera ray direction (toward the scene).
    """
    h, ok = half_vector(l, v)
    rho_s = specular(y, h, n) if y is not None else 0.0
    if y is not None and not np.all(ok):
        rho_s = ad.where(ok[..., None], rho_s, 0.0)
    cos = ad.maximum(ad.dot(l, n), 0.0)
    shade = ad.mul(c_in, cos)
    shape = ad.value_of(shade).shape
    shade = ad.reshape(shade, shape + (1,)) if ad.is_var(shade) else np.asarray(shade)[..., None]
    return ad.mul(ad.add(albedo, rho_s), shade)


def rgb_loss(pred, target):
    """Per-pixel L1 summed over channels, averaged over pixels."""
    per_pixel = ad.sum(ad.absolute(ad.sub(pred, target)), axis=-1)
    return ad.mean(per_pixel)


def total_loss(photometric, eikonal, eikonal_weight=0.1, ground_pin=None, ground_weight=1.0):
    """photometric + eikonal_weight * eikonal (+ ground_weight * ground pinning term)."""
    loss = ad.add(photometric, ad.mul(eikonal, eikonal_weight))
    if ground_pin is not None:
        loss = ad.add(loss, ad.mul(ground_pin, ground_weight))
    return loss


def check_supervision(kinds):
    kinds = set(kinds)
    if len(kinds) > 1:
        raise MixedSupervisionError(f"batch mixes supervision types {sorted(kinds)}")
    return kinds.pop() if kinds else None
