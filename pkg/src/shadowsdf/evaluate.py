"""Metrics, mesh extraction, relighting and hidden-geometry coverage."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .fields import detached, normal, sdf_gradient
from .raycast import Rays, project_to_surface, ray_march
from .render import RenderOptions, render_image


@dataclass
class DepthMap:
    """Per-pixel ray parameter t (scene units) with a foreground mask."""

    t: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.t.shape != self.mask.shape:
            raise ValueError("depth and mask shapes differ")
        bad = self.mask & ~(np.isfinite(self.t) & (self.t > 0))
        if np.any(bad):
            raise ValueError(f"{int(bad.sum())} valid depth entries are not positive and finite")


@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3)))

    def __len__(self):
        return len(self.faces)

    def face_areas(self):
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=-1)


# --------------------------------------------------------------------------
# depth and normal metrics

def render_depth_normal(field, camera, level=1, chunk=4096):
    """March every pixel; returns (DepthMap, (H, W, 3) normals).

    The foreground is the set of object (non-ground) hits.
    """
    fd = detached(field)
    uv = camera.pixel_centers(level)
    w, h = camera.width // level, camera.height // level
    t = np.zeros(len(uv))
    nrm = np.zeros((len(uv), 3))
    fg = np.zeros(len(uv), dtype=bool)
    for s in range(0, len(uv), chunk):
        rays = camera.rays(uv[s:s + chunk])
        hit = ray_march(fd, rays)
        obj = hit.hit_object
        idx = s + np.flatnonzero(obj)
        t[idx] = hit.t[obj]
        fg[idx] = True
        if obj.any():
            nrm[idx] = normal(fd, hit.x[obj])
    return DepthMap(t.reshape(h, w), fg.reshape(h, w)), nrm.reshape(h, w, 3)


def depth_l1(pred: DepthMap, gt: DepthMap, aligned=True):
    """Mean |t_pred - t_gt| on the shared foreground.

    With ``aligned`` the prediction is first mapped by the least-squares
    scale and offset ``a * t + b`` onto the ground truth.
    """
    mask = pred.mask & gt.mask
    if not mask.any():
        raise ValueError("depth maps share no valid pixels")
    p = pred.t[mask]
    g = gt.t[mask]
    if aligned:
        A = np.stack([p, np.ones_like(p)], axis=-1)
        (a, b), *_ = np.linalg.lstsq(A, g, rcond=None)
        p = a * p + b
    return float(np.mean(np.abs(p - g)))


def normal_mae(pred, gt, mask=None):
    """Mean angle in degrees between unit normal rasters over ``mask``."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    m = np.ones(len(pred), dtype=bool) if mask is None else np.asarray(mask, bool).ravel()
    if not m.any():
        raise ValueError("normal mask is empty")
    c = np.clip(np.sum(pred[m] * gt[m], axis=-1), -1.0, 1.0)
    return float(np.degrees(np.mean(np.arccos(c))))


def render_albedo(field, material, camera, level=1, chunk=4096):
    """Diffuse albedo at the first hit of every pixel; returns ((H, W, 3), hit mask)."""
    fd = detached(field)
    obj = getattr(fd, "obj", fd)
    uv = camera.pixel_centers(level)
    w, h = camera.width // level, camera.height // level
    alb = np.zeros((len(uv), 3))
    ok = np.zeros(len(uv), dtype=bool)
    for s in range(0, len(uv), chunk):
        hit = ray_march(fd, camera.rays(uv[s:s + chunk]))
        idx = s + np.flatnonzero(hit.valid)
        x = hit.x[hit.valid]
        if len(x):
            feat = obj.sdf_feature(x)[1] if hasattr(obj, "sdf_feature") else None
            alb[idx] = np.asarray(material.forward(x, normal(fd, x), feat)[0])
            ok[idx] = True
    return alb.reshape(h, w, 3), ok.reshape(h, w)


def albedo_accuracy(pred, gt, mask, rel=0.15):
    """Fraction of ``mask`` pixels whose albedo is within ``rel`` of ``gt`` in every channel."""
    mask = np.asarray(mask, bool)
    if not mask.any():
        raise ValueError("albedo mask is empty")
    gt = np.broadcast_to(np.asarray(gt, dtype=np.float64), np.shape(pred))
    err = np.abs(np.asarray(pred)[mask] - gt[mask]) / np.maximum(np.abs(gt[mask]), 1e-12)
    return float(np.mean(np.all(err <= rel, axis=-1)))


# --------------------------------------------------------------------------
# meshes

def _object_sdf(field):
    fd = detached(field)
    return fd.object_sdf if hasattr(fd, "object_sdf") else fd.sdf


def _as_sdf_field(fn):
    class _F:
        def sdf(self, x):
            return fn(x)
    return _F()


def extract_mesh(field, resolution=128, radius=1.0, chunk=65536):
    """Marching cubes on the object SDF sampled over ``[-radius, radius]^3``.

    A field with a ground (``SceneField``) contributes only its object part.
    Returns an empty mesh when the sampled SDF has no sign change.
    """
    from skimage.measure import marching_cubes

    if resolution < 16:
        raise ValueError("resolution must be at least 16")
    sdf = _object_sdf(field)
    axis = np.linspace(-radius, radius, resolution)
    grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
    vals = np.concatenate([np.asarray(sdf(grid[s:s + chunk]), dtype=np.float64)
                           for s in range(0, len(grid), chunk)])
    vals = vals.reshape(resolution, resolution, resolution)
    if not (vals.min() < 0 < vals.max()):
        return Mesh.empty()
    spacing = (axis[1] - axis[0],) * 3
    verts, faces, _, _ = marching_cubes(vals, level=0.0, spacing=spacing)
    verts = verts - radius
    v = verts[faces]
    area = 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=-1)
    faces = faces[area > 1e-12]
    _, g = sdf_gradient(_as_sdf_field(sdf), verts)
    n = g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)
    return Mesh(verts, faces, n)


def write_obj(path, mesh: Mesh):
    with open(path, "w") as fh:
        fh.write(f"# {len(mesh.vertices)} vertices, {len(mesh.faces)} faces\n")
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.7g} {v[1]:.7g} {v[2]:.7g}\n")
        for n in mesh.normals:
            fh.write(f"vn {n[0]:.7g} {n[1]:.7g} {n[2]:.7g}\n")
        for f in mesh.faces + 1:
            fh.write(f"f {f[0]}//{f[0]} {f[1]}//{f[1]} {f[2]}//{f[2]}\n")


def read_obj(path):
    verts, norms, faces = [], [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "vn":
                norms.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return Mesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3),
                np.array(norms).reshape(-1, 3))


# --------------------------------------------------------------------------
# relighting and hidden geometry

def relight(field, material, camera, light, level=1, options: RenderOptions | None = None):
    """Render an RGB raster of the reconstruction under ``light`` (one or a list)."""
    img, _ = render_image(field, camera, light, mode="rgb", material=material, level=level,
                          options=options)
    return img


def sample_surface(field, rng, n=4096, radius=1.0, tol=1e-4):
    """Points on the zero set of ``field`` by Newton projection of random points.

    Starts are uniform directions at a random radius; points that fail to
    converge or leave the ball are dropped.
    """
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    p = d * radius * rng.uniform(0.05, 1.0, size=(n, 1))
    p = project_to_surface(field, p, iters=20)
    f = np.asarray(field.sdf(p))
    keep = (np.abs(f) < tol) & (np.linalg.norm(p, axis=-1) < radius)
    return p[keep]


def hidden_points(gt_field, camera, points, scene_field=None, eps=1e-3):
    """Mask of ``points`` (on the GT surface) that the camera cannot see.

    A point is hidden when its GT normal faces away from the camera or when
    the camera ray to it meets ``scene_field`` (default ``gt_field``) first.
    """
    scene_field = gt_field if scene_field is None else scene_field
    _, g = sdf_gradient(gt_field, points)
    to_p = points - camera.center
    dist = np.linalg.norm(to_p, axis=-1)
    back = np.sum(g * to_p, axis=-1) > 0
    rays = Rays(np.broadcast_to(camera.center, points.shape).copy(), to_p / dist[:, None],
                np.zeros(len(points)), dist + 1.0)
    hit = ray_march(scene_field, rays)
    blocked = hit.valid & (hit.t < dist - eps)
    return back | blocked


def invisible_coverage(mesh: Mesh, gt_field, camera, tau=0.05, n=4096, seed=0, scene_field=None,
                       keep=None):
    """Fraction of camera-hidden GT surface points within ``tau`` of the mesh.

    Distance to the mesh is measured to its nearest vertex, which
    overestimates the point-to-triangle distance by at most the vertex
    spacing.  ``keep`` optionally filters the sampled points (for example to
    drop points buried in the ground).
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    rng = np.random.default_rng(seed)
    pts = sample_surface(gt_field, rng, n)
    if keep is not None:
        pts = pts[keep(pts)]
    pts = pts[hidden_points(gt_field, camera, pts, scene_field)]
    if len(pts) == 0:
        raise ValueError("no hidden surface points were sampled")
    if len(mesh.vertices) == 0:
        return 0.0
    d, _ = cKDTree(mesh.vertices).query(pts)
    return float(np.mean(d < tau))
