"""Shadow rays: light models, SDF-to-opacity, incoming radiance, boundary blend."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffengine as ad
from . import kernels
from .fields import detached
from .raycast import sphere_interval


# --------------------------------------------------------------------------
# lights

class LightSource:
    """Directional light ``(direction toward light, L)`` or point light ``(q, L_p)``."""

    def __init__(self, kind, direction=None, position=None, intensity=1.0):
        if kind not in ("directional", "point"):
            raise ValueError(f"unknown light kind {kind!r}")
        if intensity < 0:
            raise ValueError("light intensity must be nonnegative")
        self.kind = kind
        self.intensity = float(intensity)
        self.direction = None
        self.position = None
        if kind == "directional":
            d = np.asarray(direction, dtype=np.float64)
            nd = np.linalg.norm(d)
            if abs(nd - 1.0) > 1e-6:
                raise ValueError(f"directional light needs a unit direction, got norm {nd:.6g}")
            self.direction = d / nd
        else:
            self.position = np.asarray(position, dtype=np.float64)

    @classmethod
    def directional(cls, direction, intensity=1.0):
        d = np.asarray(direction, dtype=np.float64)
        return cls("directional", direction=d / np.linalg.norm(d), intensity=intensity)

    @classmethod
    def point(cls, position, intensity=1.0):
        return cls("point", position=position, intensity=intensity)

    def __repr__(self):
        if self.kind == "directional":
            return f"LightSource.directional({self.direction.tolist()}, {self.intensity})"
        return f"LightSource.point({self.position.tolist()}, {self.intensity})"

    def at(self, x, falloff=True):
        """(unit direction toward the light, intensity) at points ``x`` (..., 3)."""
        return light_at(self, x, falloff)

    def scaled(self, k):
        return LightSource(self.kind, self.direction, self.position, self.intensity * k)


def light_at(light: LightSource, x, falloff=True):
    """Direction and intensity of ``light`` at ``x``; differentiable in ``x``.

    Point lights fall off with the inverse square distance unless
    ``falloff`` is False (binary shadow supervision only uses direction).
    """
    shape = ad.value_of(x).shape[:-1]
    if light.kind == "directional":
        l = np.broadcast_to(light.direction, shape + (3,))
        return l, np.full(shape, light.intensity)
    diff = ad.sub(light.position, x)
    dist = ad.norm(diff, axis=-1)
    if np.any(np.asarray(ad.value_of(dist)) <= 1e-6):
        raise ValueError("point light coincides with a shading point")
    l = ad.div(diff, ad.reshape(dist, shape + (1,)) if ad.is_var(dist) else dist[..., None])
    if not falloff:
        return l, np.full(shape, light.intensity)
    return l, ad.div(light.intensity, ad.square(dist))


@dataclass
class LightBatch:
    """One light slot per ray, so a batch may mix images with different lights."""

    is_point: np.ndarray
    vec: np.ndarray
    intensity: np.ndarray

    @classmethod
    def gather(cls, lights, which):
        """Per-ray lights ``lights[which[r]]``."""
        isp = np.array([l.kind == "point" for l in lights])
        vec = np.array([l.position if l.kind == "point" else l.direction for l in lights])
        inten = np.array([l.intensity for l in lights])
        which = np.asarray(which)
        return cls(isp[which], vec[which], inten[which])

    def __len__(self):
        return len(self.is_point)

    def subset(self, idx):
        return LightBatch(self.is_point[idx], self.vec[idx], self.intensity[idx])

    def at(self, x, falloff=True):
        """Per-ray (direction, intensity) at ``x`` (N, 3); differentiable in ``x``."""
        if not self.is_point.any():
            return self.vec, self.intensity
        diff = ad.sub(self.vec, x)
        dist = ad.norm(diff, axis=-1)
        dv = np.asarray(ad.value_of(dist))
        dist = ad.where(self.is_point, dist, 1.0)
        lp = ad.div(diff, ad.reshape(dist, (len(self), 1)) if ad.is_var(dist) else dist[:, None])
        l = ad.where(self.is_point[:, None], lp, self.vec)
        if np.any(self.is_point & (dv <= 1e-6)):
            raise ValueError("point light coincides with a shading point")
        if not falloff:
            return l, self.intensity
        L = ad.where(self.is_point, ad.div(self.intensity, ad.square(dist)), self.intensity)
        return l, L


# --------------------------------------------------------------------------
# opacity

def log_sigmoid(z):
    """log(1 / (1 + exp(-z))), stable for large |z|."""
    return ad.neg(ad.softplus(ad.neg(z)))


def log_one_minus_alpha(f_i, f_next, s):
    """log(1 - alpha) = min(log Phi_s(f_next) - log Phi_s(f_i), 0)."""
    d = ad.sub(log_sigmoid(ad.mul(f_next, s)), log_sigmoid(ad.mul(f_i, s)))
    return ad.minimum(d, 0.0)


def alpha_from_sdf(f_i, f_next, s):
    """Opacity max(1 - Phi_s(f_next) / Phi_s(f_i), 0) of one ray segment."""
    return ad.sub(1.0, ad.exp(log_one_minus_alpha(f_i, f_next, s)))


@dataclass
class ShadowRaySamples:
    """Sample positions along shadow rays and the resulting opacities."""

    t: np.ndarray
    f: object
    alpha: object


def sample_positions(field, x, l, far, s, n_uniform=80, n_importance=64):
    """Sorted, detached sample positions along rays ``x + t l``, t in [0, far].

    ``n_uniform`` evenly spaced samples give coarse opacities; their
    transmittance-weighted histogram drives ``n_importance`` extra samples
    by deterministic inverse-CDF sampling.
    """
    x = np.asarray(x, dtype=np.float64)
    l = np.asarray(l, dtype=np.float64)
    far = np.asarray(far, dtype=np.float64)
    u = np.linspace(0.0, 1.0, n_uniform)
    t = far[:, None] * u[None, :]
    if n_importance <= 0 or n_uniform < 2:
        return t
    fd = detached(field)
    pts = x[:, None, :] + t[..., None] * l[:, None, :]
    f = np.asarray(fd.sdf(pts.reshape(-1, 3)), dtype=np.float64).reshape(t.shape)
    sv = float(np.asarray(ad.value_of(s)))
    la = np.asarray(log_one_minus_alpha(f[:, :-1], f[:, 1:], sv))
    alpha = 1.0 - np.exp(la)
    trans = np.exp(np.concatenate([np.zeros((len(t), 1)), np.cumsum(la, axis=1)[:, :-1]], axis=1))
    weights = trans * alpha
    extra = kernels.sample_pdf(t, weights, n_importance)
    return np.sort(np.concatenate([t, extra], axis=1), axis=1)


def shadow_samples(field, x, l, t, s):
    """Evaluate f and alpha at samples ``t`` along ``x + t l`` (x, l may be Vars)."""
    n, k = t.shape
    xv = ad.reshape(x, (n, 1, 3)) if ad.is_var(x) else np.asarray(x)[:, None, :]
    lv = ad.reshape(l, (n, 1, 3)) if ad.is_var(l) else np.asarray(l)[:, None, :]
    pts = ad.add(xv, ad.mul(t[..., None], lv))
    f = ad.reshape(field.sdf(ad.reshape(pts, (n * k, 3))), (n, k))
    la = log_one_minus_alpha(f[:, :-1], f[:, 1:], s)
    return ShadowRaySamples(t, f, ad.sub(1.0, ad.exp(la))), la


def shadow_far(x, l, is_point=None, light_pos=None, radius=1.0):
    """Exit distance of the scene sphere along ``l`` (clipped at point lights)."""
    x = np.asarray(x, dtype=np.float64)
    l = np.asarray(l, dtype=np.float64)
    _, far = sphere_interval(x, l, radius)
    if is_point is not None and np.any(is_point):
        dist = np.linalg.norm(light_pos - x, axis=-1)
        far = np.where(is_point, np.minimum(far, dist), far)
    return far


def incoming_radiance(field, x, light, s=None, n_uniform=80, n_importance=64, falloff=True,
                      radius=1.0, return_samples=False, t_samples=None):
    """C_in = L * prod(1 - alpha_i) along the shadow ray from ``x`` toward the light.

    ``light`` is a :class:`LightSource` shared by all rays or a
    :class:`LightBatch` with one light per ray.  ``x`` may be a Var (the
    differentiable intersection); ``s`` defaults to the field's sharpness.
    The transmittance is accumulated in log space.  ``t_samples`` reuses
    previously drawn sample positions instead of placing new ones.
    """
    s = field.sharpness() if s is None else s
    xv = np.asarray(ad.value_of(x), dtype=np.float64)
    if isinstance(light, LightSource):
        light = LightBatch.gather([light], np.zeros(len(xv), dtype=int))
    l, L = light.at(x, falloff=falloff)
    lv = np.asarray(ad.value_of(l))
    if t_samples is None:
        far = shadow_far(xv, lv, light.is_point, light.vec, radius)
        t = sample_positions(field, xv, lv, far, s, n_uniform, n_importance)
    else:
        t = np.asarray(t_samples, dtype=np.float64)
    samples, la = shadow_samples(field, x, l, t, s)
    c = ad.mul(L, ad.exp(ad.sum(la, axis=-1)))
    return (c, samples) if return_samples else c


def aggregate_boundary(c_center, c_near, c_far, w, is_boundary):
    """Non-boundary pixels keep C(x_hat); boundary pixels blend w C_near + (1 - w) C_far."""
    blend = ad.add(ad.mul(w, c_near), ad.mul(ad.sub(1.0, w), c_far))
    return ad.where(is_boundary, blend, c_center)


def shadow_loss(c_in, target):
    """Mean L1 between incoming radiance and shadow supervision."""
    return ad.mean(ad.absolute(ad.sub(c_in, target)))
