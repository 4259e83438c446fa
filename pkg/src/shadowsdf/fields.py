"""Neural and analytic signed distance fields, normals, Eikonal loss, checkpoints."""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import diffengine as ad
from . import kernels
from .optim import Adam


class DegenerateNormalError(ValueError):
    """The SDF gradient vanished where a normal was requested."""


# --------------------------------------------------------------------------
# encoding

def positional_encode(p, n_freqs):
    """Concatenate ``p`` with sin/cos of ``2^k * pi * p`` for k < n_freqs."""
    parts = [p]
    for k in range(n_freqs):
        w = (2.0 ** k) * np.pi
        parts.append(ad.sin(ad.mul(p, w)))
        parts.append(ad.cos(ad.mul(p, w)))
    if len(parts) == 1:
        return p
    return ad.concatenate(parts, axis=-1)


# --------------------------------------------------------------------------
# parameter storage

class FieldParameters:
    """Flat parameter vector with a named layer layout.

    ``views()`` returns reshaped numpy views into ``flat`` so optimizer
    updates on the flat vector are seen by the networks without copying.
    """

    def __init__(self, layout, flat=None, dtype=np.float64):
        self.layout = [(name, tuple(int(n) for n in shape)) for name, shape in layout]
        size = sum(int(np.prod(s)) for _, s in self.layout)
        if flat is None:
            flat = np.zeros(size, dtype=dtype)
        flat = np.asarray(flat)
        if flat.shape != (size,):
            raise ValueError(f"parameter vector has {flat.size} entries, layout needs {size}")
        self.flat = flat

    @property
    def size(self):
        return self.flat.size

    def views(self):
        out = {}
        start = 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            out[name] = self.flat[start:start + n].reshape(shape)
            start += n
        return out

    def leaves(self, tape):
        return {name: tape.var(v) for name, v in self.views().items()}

    def flatten_grads(self, grads):
        """Pack a name->gradient mapping into a vector shaped like ``flat``."""
        out = np.zeros_like(self.flat)
        start = 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            g = grads.get(name)
            if g is not None:
                out[start:start + n] = np.asarray(ad.value_of(g)).reshape(-1)
            start += n
        return out

    def astype(self, dtype):
        return FieldParameters(self.layout, self.flat.astype(dtype))

    def copy(self):
        return FieldParameters(self.layout, self.flat.copy())


# --------------------------------------------------------------------------
# networks

class SdfNetwork:
    """Geometry MLP: encoded position -> (signed distance, feature vector).

    ``depth`` hidden layers of ``width`` units with softplus(beta)
    activations; the encoded input is re-injected before each layer listed in
    ``skips`` (NeuS layout).  Geometric initialisation makes the untrained
    network approximate a sphere of ``init_radius`` around the origin.

    The sharpness s of the SDF-to-opacity conversion is stored as the raw
    scalar ``s_raw`` with ``s = exp(s_scale * s_raw)``.
    """

    def __init__(self, depth=8, width=256, n_freqs=6, skips=None, feature_dim=None,
                 beta=100.0, init_radius=0.5, init_s=20.0, s_scale=10.0, seed=0,
                 dtype=np.float64, params=None, init_fit_steps=200):
        self.depth = depth
        self.width = width
        self.n_freqs = n_freqs
        self.skips = tuple(skips) if skips is not None else ((depth // 2,) if depth >= 4 else ())
        self.feature_dim = width if feature_dim is None else feature_dim
        self.beta = beta
        self.init_radius = init_radius
        self.s_scale = s_scale
        self.d_in = 3 + 6 * n_freqs
        self.dims = self._dims()
        if params is None:
            rng = np.random.default_rng(seed)
            params = self._init_params(rng, init_s)
            self.params = params
            if init_fit_steps:
                self._fit_sphere(rng, init_fit_steps)
            params = self.params.astype(dtype)
        elif not isinstance(params, FieldParameters):
            params = FieldParameters(self.layout(), params)
        self.params = params

    def config(self):
        return {"depth": self.depth, "width": self.width, "n_freqs": self.n_freqs,
                "skips": list(self.skips), "feature_dim": self.feature_dim,
                "beta": self.beta, "init_radius": self.init_radius, "s_scale": self.s_scale}

    def _dims(self):
        dims = []
        d_prev = self.d_in
        for layer in range(self.depth + 1):
            d_out = 1 + self.feature_dim if layer == self.depth else self.width
            if layer + 1 in self.skips:
                d_out = self.width - self.d_in
            dims.append((d_prev, d_out))
            d_prev = d_out + self.d_in if layer + 1 in self.skips else d_out
        return dims

    def layout(self):
        lay = []
        for i, (a, b) in enumerate(self.dims):
            lay += [(f"w{i}", (a, b)), (f"b{i}", (b,))]
        lay.append(("s_raw", ()))
        return lay

    def _fit_sphere(self, rng, steps, n_points=1024, lr=1e-3):
        # softplus offsets bias the geometric init; a short regression onto the
        # exact sphere distance removes it
        opt = Adam(self.params.size)
        flat = self.params.flat
        names = [n for n, _ in self.layout() if n != "s_raw"]
        for _ in range(steps):
            d = rng.normal(size=(n_points, 3))
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            pts = d * rng.random(n_points)[:, None]
            target = np.linalg.norm(pts, axis=1) - self.init_radius
            tape = ad.Tape()
            leaves = self.params.leaves(tape)
            f, _ = self.forward(pts, leaves)
            loss = ad.mean(ad.square(ad.sub(f, target)))
            grads = tape.backward(loss, [leaves[n] for n in names])
            g = self.params.flatten_grads(dict(zip(names, grads)))
            opt.step(flat, g, lr)

    def _init_params(self, rng, init_s, dtype=np.float64):
        P = FieldParameters(self.layout(), dtype=np.float64)
        v = P.views()
        last = len(self.dims) - 1
        for i, (a, b) in enumerate(self.dims):
            w = v[f"w{i}"]
            if i == last:
                w[...] = rng.normal(np.sqrt(np.pi) / np.sqrt(a), 1e-4, size=(a, b))
                v[f"b{i}"][...] = -self.init_radius
                continue
            w[...] = rng.normal(0.0, np.sqrt(2.0) / np.sqrt(b), size=(a, b))
            if i == 0 and self.n_freqs > 0:
                w[3:, :] = 0.0
            elif i in self.skips and self.n_freqs > 0:
                w[-(self.d_in - 3):, :] = 0.0
        v["s_raw"][...] = np.log(init_s) / self.s_scale
        return P.astype(dtype)

    def sharpness(self, P=None):
        P = self.params.views() if P is None else P
        return ad.exp(ad.mul(P["s_raw"], self.s_scale))

    def forward(self, x, P=None):
        """Return (sdf, feature) for points ``x`` of shape (..., 3)."""
        P = self.params.views() if P is None else P
        x = ad.cast(x, ad.value_of(P["w0"]).dtype)
        enc = positional_encode(x, self.n_freqs)
        h = enc
        last = len(self.dims) - 1
        for i in range(len(self.dims)):
            if i in self.skips:
                h = ad.mul(ad.concatenate([h, enc], axis=-1), 1.0 / np.sqrt(2.0))
            h = ad.add(ad.matmul(h, P[f"w{i}"]), P[f"b{i}"])
            if i < last:
                h = ad.softplus(h, beta=self.beta)
        return h[..., 0], h[..., 1:]

    def bind(self, P=None):
        return NetworkField(self, P)


class NetworkField:
    """An :class:`SdfNetwork` paired with concrete (array or Var) parameters."""

    def __init__(self, net, P=None):
        self.net = net
        self.P = net.params.views() if P is None else P

    def sdf(self, x):
        return self.net.forward(x, self.P)[0]

    def sdf_feature(self, x):
        return self.net.forward(x, self.P)

    def sharpness(self):
        return self.net.sharpness(self.P)

    def detached(self):
        return NetworkField(self.net, {k: ad.value_of(v) for k, v in self.P.items()})


class MaterialNetwork:
    """Material MLP: position + normal + geometry feature -> (albedo, specular).

    ``depth`` linear layers with ReLU between them and a softplus(beta=100)
    output; the first 3 outputs are the diffuse albedo, the remaining 27 the
    specular-lobe coefficients (9 lobes x 3 channels).
    """

    n_out = 30

    def __init__(self, feature_dim=256, depth=4, width=256, seed=1, dtype=np.float64,
                 init_albedo_bias=0.5, params=None):
        self.feature_dim = feature_dim
        self.depth = depth
        self.width = width
        self.d_in = 6 + feature_dim
        dims = []
        d_prev = self.d_in
        for i in range(depth):
            d_out = self.n_out if i == depth - 1 else width
            dims.append((d_prev, d_out))
            d_prev = d_out
        self.dims = dims
        if params is None:
            rng = np.random.default_rng(seed)
            params = FieldParameters(self.layout(), dtype=np.float64)
            v = params.views()
            for i, (a, b) in enumerate(dims):
                v[f"w{i}"][...] = rng.normal(0.0, np.sqrt(2.0 / a), size=(a, b))
                if i == depth - 1:
                    v[f"w{i}"][...] *= 0.1
            v[f"b{depth - 1}"][:3] = init_albedo_bias
            params = params.astype(dtype)
        elif not isinstance(params, FieldParameters):
            params = FieldParameters(self.layout(), params)
        self.params = params

    def config(self):
        return {"feature_dim": self.feature_dim, "depth": self.depth, "width": self.width}

    def layout(self):
        lay = []
        for i, (a, b) in enumerate(self.dims):
            lay += [(f"w{i}", (a, b)), (f"b{i}", (b,))]
        return lay

    def forward(self, x, n, feature, P=None):
        P = self.params.views() if P is None else P
        dt = ad.value_of(P["w0"]).dtype
        h = ad.concatenate([ad.cast(x, dt), ad.cast(n, dt), ad.cast(feature, dt)], axis=-1)
        for i in range(self.depth):
            h = ad.add(ad.matmul(h, P[f"w{i}"]), P[f"b{i}"])
            if i < self.depth - 1:
                h = ad.relu(h)
        out = ad.softplus(h, beta=100.0)
        return out[..., :3], out[..., 3:]


def material_eval(mat, p, n, feature, P=None):
    """Return nonnegative (albedo (...,3), specular coefficients (...,27))."""
    return mat.forward(p, n, feature, P)


def sdf_eval(field, p):
    """(signed distance, feature) of a network field or analytic SDF."""
    if hasattr(field, "sdf_feature"):
        return field.sdf_feature(p)
    f = field.sdf(p)
    return f, None


# --------------------------------------------------------------------------
# analytic primitives

class AnalyticSdf:
    """Base for closed-form SDFs; attributes may be Vars for differentiation."""

    def sdf(self, x):
        raise NotImplementedError

    def prims(self):
        raise NotImplementedError

    def __call__(self, x):
        return self.sdf(x)


@dataclass
class Sphere(AnalyticSdf):
    center: object = (0.0, 0.0, 0.0)
    radius: object = 1.0

    def sdf(self, x):
        return ad.sub(ad.norm(ad.sub(x, self.center), axis=-1), self.radius)

    def prims(self):
        c = np.asarray(ad.value_of(self.center), float)
        return np.array([[kernels.SPHERE, *c, float(ad.value_of(self.radius)), 0, 0, 0]])


@dataclass
class Plane(AnalyticSdf):
    """Half-space ``n . p <= offset`` is inside."""

    normal: object = (0.0, 0.0, 1.0)
    offset: object = 0.0

    def __post_init__(self):
        n = np.asarray(ad.value_of(self.normal), float)
        if not ad.is_var(self.normal):
            self.normal = n / np.linalg.norm(n)

    def sdf(self, x):
        return ad.sub(ad.dot(x, self.normal), self.offset)

    def prims(self):
        n = np.asarray(ad.value_of(self.normal), float)
        return np.array([[kernels.PLANE, *n, float(ad.value_of(self.offset)), 0, 0, 0]])


@dataclass
class Box(AnalyticSdf):
    center: object = (0.0, 0.0, 0.0)
    half_extents: object = (0.5, 0.5, 0.5)

    def sdf(self, x):
        q = ad.sub(ad.absolute(ad.sub(x, self.center)), self.half_extents)
        qv = ad.value_of(q)
        # the outside norm has an undefined gradient where q <= 0 everywhere;
        # feed it a dummy there so no 0/0 reaches the backward pass
        safe = np.linalg.norm(np.maximum(qv, 0), axis=-1) > 0
        qpos = ad.maximum(q, 0.0)
        if ad.is_var(q):
            qpos = ad.where(safe[..., None], qpos, 1.0)
            outside = ad.where(safe, ad.norm(qpos, axis=-1), 0.0)
        else:
            outside = ad.norm(qpos, axis=-1)
        qmax = _max_last(q)
        return ad.add(outside, ad.minimum(qmax, 0.0))

    def prims(self):
        c = np.asarray(ad.value_of(self.center), float)
        h = np.asarray(ad.value_of(self.half_extents), float)
        return np.array([[kernels.BOX, *c, *h, 0]])


def _max_last(q):
    qv = ad.value_of(q)
    idx = np.argmax(qv, axis=-1)
    onehot = (np.arange(qv.shape[-1]) == idx[..., None]).astype(qv.dtype)
    return ad.sum(ad.mul(q, onehot), axis=-1)


@dataclass
class BumpyPlane(AnalyticSdf):
    """Height field z = offset + amp sin(freq x) sin(freq y), Lipschitz-scaled."""

    offset: float = 0.0
    amp: float = 0.05
    freq: float = 6.0

    def _scale(self):
        return 1.0 / np.sqrt(1.0 + 2.0 * (self.amp * self.freq) ** 2)

    def height(self, xy):
        xy = np.asarray(xy)
        return self.offset + self.amp * np.sin(self.freq * xy[..., 0]) * np.sin(self.freq * xy[..., 1])

    def sdf(self, x):
        h = ad.mul(ad.sin(ad.mul(x[..., 0], self.freq)), ad.sin(ad.mul(x[..., 1], self.freq)))
        return ad.mul(ad.sub(ad.sub(x[..., 2], self.offset), ad.mul(h, self.amp)), self._scale())

    def prims(self):
        return np.array([[kernels.BUMPY, self.offset, self.amp, self.freq, 0, 0, 0, 0]])


@dataclass
class Union(AnalyticSdf):
    children: list = field(default_factory=list)

    def sdf(self, x):
        out = self.children[0].sdf(x)
        for c in self.children[1:]:
            out = ad.minimum(out, c.sdf(x))
        return out

    def prims(self):
        return np.concatenate([c.prims() for c in self.children], axis=0)


# --------------------------------------------------------------------------
# ground and scene composition

@dataclass
class GroundPlane:
    """Known ground: plane ``normal . p = offset`` plus optional depth raster."""

    normal: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    offset: float = 0.0
    depth: np.ndarray | None = None

    def __post_init__(self):
        self.normal = np.asarray(self.normal, dtype=np.float64)
        n = np.linalg.norm(self.normal)
        if abs(n - 1.0) > 1e-6:
            raise ValueError(f"ground normal must be unit length, got norm {n:.6g}")

    def sdf(self, x):
        return ad.sub(ad.dot(x, self.normal), self.offset)

    def intersect(self, origins, dirs):
        """Ray parameter of the plane hit (inf when parallel or behind)."""
        denom = dirs @ self.normal
        num = self.offset - origins @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = num / denom
        t = np.where((np.abs(denom) > 1e-12) & (t > 0), t, np.inf)
        return t


class SceneField:
    """Object SDF clipped to the scene sphere and unioned with the ground.

    ``f = min(ground, max(object, |p| - R))``.  Pass ``ground=None`` for the
    non-planar-ground variant where the network models the ground itself.
    """

    def __init__(self, obj, ground=None, bound_radius=1.0):
        self.obj = obj
        self.ground = ground
        self.bound_radius = bound_radius

    def object_sdf(self, x):
        f = self.obj.sdf(x)
        if self.bound_radius is not None:
            f = ad.maximum(f, ad.sub(ad.norm(x, axis=-1), self.bound_radius))
        return f

    def parts(self, x):
        fo = self.object_sdf(x)
        if self.ground is None:
            return fo, fo, None
        fg = self.ground.sdf(x)
        return ad.minimum(fg, fo), fo, fg

    def sdf(self, x):
        return self.parts(x)[0]

    def sharpness(self):
        return self.obj.sharpness()

    def detached(self):
        return SceneField(detached(self.obj), self.ground, self.bound_radius)


def detached(field):
    """Copy of ``field`` whose parameters are plain arrays (no tape recording)."""
    if hasattr(field, "detached"):
        return field.detached()
    if dataclasses.is_dataclass(field):
        vals = {f.name: ad.value_of(getattr(field, f.name)) for f in dataclasses.fields(field)}
        if isinstance(field, Union):
            vals["children"] = [detached(c) for c in field.children]
        return type(field)(**vals)
    return field


# --------------------------------------------------------------------------
# gradients, normals, Eikonal

def sdf_gradient(field, x, tape=None, create_graph=False):
    """Return (f, df/dx) at ``x``.

    Without ``tape`` the field must hold plain arrays; results are arrays.
    With a tape, ``x`` may be an array (made a leaf) or a Var, and with
    ``create_graph`` the gradient stays differentiable w.r.t. everything the
    field depends on.
    """
    own = tape is None
    if own:
        tape = ad.Tape()
    xv = x if ad.is_var(x) else tape.var(np.asarray(x))
    f = field.sdf(xv)
    if not ad.is_var(f):
        raise ValueError("field does not depend on its input")
    (g,) = tape.backward(ad.sum(f), [xv], create_graph=create_graph)
    if own:
        return ad.value_of(f), np.asarray(g)
    return f, g


def normal(field, x, tape=None, create_graph=False):
    """Unit normal grad f / |grad f|; raises on a vanishing gradient."""
    _, g = sdf_gradient(field, x, tape=tape, create_graph=create_graph)
    gn = np.linalg.norm(ad.value_of(g), axis=-1)
    if np.any(gn <= 1e-8):
        raise DegenerateNormalError(f"SDF gradient vanishes at {int(np.sum(gn <= 1e-8))} point(s)")
    return ad.div(g, ad.norm(g, axis=-1, keepdims=True))


def eikonal_loss(field, points, tape=None):
    """Mean of (|grad f| - 1)^2 over ``points``."""
    points = np.asarray(points)
    if len(points) < 1:
        raise ValueError("Eikonal loss needs at least one point")
    _, g = sdf_gradient(field, points, tape=tape, create_graph=tape is not None)
    return ad.mean(ad.square(ad.sub(ad.norm(g, axis=-1), 1.0)))


def sphere_points(rng, n, radius=1.0):
    """Uniform samples inside a ball."""
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    r = radius * rng.random(n) ** (1.0 / 3.0)
    return v * r[:, None]


# --------------------------------------------------------------------------
# checkpoint container
#
# Layout (little-endian):
#   8 bytes   magic b"SSDFCKPT"
#   4 bytes   uint32 format version
#   8 bytes   uint64 header length H
#   H bytes   UTF-8 JSON header: {"meta": {...}, "arrays": [{name, dtype, shape, offset, nbytes}]}
#   ...       raw C-order array bytes at the recorded offsets (relative to the payload start)

CHECKPOINT_MAGIC = b"SSDFCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, arrays, meta):
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        dt = a.dtype.newbyteorder("<")
        raw = a.astype(dt).tobytes()
        entries.append({"name": name, "dtype": dt.str, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[20:20 + hlen].decode())
    base = 20 + hlen
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        buf = data[start:start + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return arrays, header["meta"]
