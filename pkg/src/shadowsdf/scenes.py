"""Synthetic scenes, a brute-force oracle renderer and dataset I/O.

Dataset layout::

    <dir>/manifest.json       camera, ground, scene description, image records
    <dir>/images/NNN.png      binary shadow images (0 / 255)
    <dir>/images/NNN.pfm      linear float RGB images
    <dir>/ground_depth.pfm    optional ground depth raster (non-planar ground)

Manifest schema (version 1)::

    {"version": 1, "type": "binary" | "rgb", "resolution": [W, H],
     "camera": {"fx", "fy", "cx", "cy", "width", "height", "R": 3x3, "t": 3},
     "ground": {"normal": 3, "offset": float, "depth_file": str | null},
     "scene": {built-in scene description, ground truth for evaluation},
     "images": [{"file": str, "lights": [light record, ...]}, ...],
     "seed": int}

    light record: {"type": "directional", "direction": 3, "intensity": L}
               or {"type": "point", "position": 3, "intensity": L_p}

All rasters are row-major (H, W) with pixel (i, j) centred at image
coordinates (i + 0.5, j + 0.5); the camera follows the OpenCV convention
(x right, y down, z forward, ``x_cam = R x_world + t``).
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import diffengine as ad
from . import kernels
from .fields import BumpyPlane, Box, GroundPlane, Plane, SceneField, Sphere, Union
from .raycast import bounded_rays
from .shadowrender import LightSource

MANIFEST_VERSION = 1
OBJECT_RADIUS = 1.2      # all objects and ground bumps lie inside this sphere
FAR_GROUND = 40.0        # march length for ground hits beyond it


class DatasetError(ValueError):
    """A dataset on disk is missing, malformed or inconsistent."""


# --------------------------------------------------------------------------
# camera

@dataclass
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if np.linalg.norm(self.R.T @ self.R - np.eye(3)) > 1e-6:
            raise ValueError("camera rotation is not orthonormal")

    @classmethod
    def look_at(cls, eye, target, width, height, fov_deg, up=(0.0, 0.0, 1.0)):
        eye = np.asarray(eye, float)
        fwd = np.asarray(target, float) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(f, f, width / 2, height / 2, int(width), int(height), R, -R @ eye)

    @property
    def center(self):
        return -self.R.T @ self.t

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "R": self.R.tolist(), "t": self.t.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]), d["R"], d["t"])

    def project(self, x):
        """Image coordinates of world points; differentiable when ``x`` is a Var."""
        xc = ad.add(ad.matmul(x, self.R.T) if ad.is_var(x) else np.asarray(x) @ self.R.T, self.t)
        z = xc[..., 2]
        u = ad.add(ad.mul(ad.div(xc[..., 0], z), self.fx), self.cx)
        v = ad.add(ad.mul(ad.div(xc[..., 1], z), self.fy), self.cy)
        return ad.stack([u, v], axis=-1)

    def rays(self, uv, radius=1.0):
        """Rays through image coordinates ``uv`` (N, 2), bounded by the scene sphere."""
        uv = np.asarray(uv, dtype=np.float64)
        d = np.stack([(uv[:, 0] - self.cx) / self.fx, (uv[:, 1] - self.cy) / self.fy,
                      np.ones(len(uv))], axis=-1)
        return bounded_rays(np.broadcast_to(self.center, d.shape), d @ self.R, radius)

    def pixel_centers(self, level=1):
        """(H/level * W/level, 2) pixel centres of a pyramid level, row-major."""
        w, h = self.width // level, self.height // level
        j, i = np.mgrid[0:h, 0:w]
        return np.stack([(i.ravel() + 0.5) * level, (j.ravel() + 0.5) * level], axis=-1)


# --------------------------------------------------------------------------
# scene descriptions

def _camera_for(width, height):
    elev = np.radians(40.0)
    dist = 2.4
    eye = (0.0, -dist * np.cos(elev), dist * np.sin(elev))
    return CameraModel.look_at(eye, (0.0, 0.0, -0.2), width, height, fov_deg=36.0)


BUILTIN_SCENES = {
    "sphere-plane": {
        "objects": [{"type": "sphere", "center": [0.0, 0.0, -0.1], "radius": 0.3}],
        "ground": {"type": "plane", "normal": [0.0, 0.0, 1.0], "offset": -0.4},
        "albedo": [0.7, 0.7, 0.7], "ground_albedo": [0.7, 0.7, 0.7],
    },
    "two-spheres": {
        "objects": [{"type": "sphere", "center": [-0.28, 0.05, -0.2], "radius": 0.2},
                    {"type": "sphere", "center": [0.25, -0.05, -0.15], "radius": 0.25}],
        "ground": {"type": "plane", "normal": [0.0, 0.0, 1.0], "offset": -0.4},
        "albedo": [0.7, 0.7, 0.7], "ground_albedo": [0.7, 0.7, 0.7],
    },
    "box-plane": {
        "objects": [{"type": "box", "center": [0.0, 0.0, -0.2], "half_extents": [0.2, 0.2, 0.2]}],
        "ground": {"type": "plane", "normal": [0.0, 0.0, 1.0], "offset": -0.4},
        "albedo": [0.7, 0.7, 0.7], "ground_albedo": [0.7, 0.7, 0.7],
    },
    "bumpy-ground": {
        "objects": [{"type": "sphere", "center": [0.0, 0.0, -0.1], "radius": 0.3}],
        "ground": {"type": "bumpy", "offset": -0.4, "amp": 0.03, "freq": 8.0},
        "albedo": [0.7, 0.7, 0.7], "ground_albedo": [0.7, 0.7, 0.7],
    },
}


def builtin_scene(name):
    if name not in BUILTIN_SCENES:
        raise ValueError(f"unknown scene {name!r}; choose from {sorted(BUILTIN_SCENES)}")
    d = copy.deepcopy(BUILTIN_SCENES[name])
    d["name"] = name
    return d


def _object_from(desc):
    kind = desc.get("type")
    if kind == "sphere":
        return Sphere(np.asarray(desc["center"], float), float(desc["radius"]))
    if kind == "box":
        return Box(np.asarray(desc["center"], float), np.asarray(desc["half_extents"], float))
    if kind == "plane":
        return Plane(np.asarray(desc["normal"], float), float(desc["offset"]))
    raise ValueError(f"unknown object type {kind!r}")


def scene_objects(scene):
    """Analytic SDF of the scene's objects (without ground)."""
    objs = [_object_from(o) for o in scene["objects"]]
    return objs[0] if len(objs) == 1 else Union(objs)


def scene_ground_sdf(scene):
    g = scene["ground"]
    if g["type"] == "plane":
        return Plane(np.asarray(g["normal"], float), float(g["offset"]))
    if g["type"] == "bumpy":
        return BumpyPlane(float(g["offset"]), float(g["amp"]), float(g["freq"]))
    raise ValueError(f"unknown ground type {g['type']!r}")


def scene_ground_plane(scene):
    """Planar ground as a :class:`GroundPlane`, or None for non-planar ground."""
    g = scene["ground"]
    if g["type"] != "plane":
        return None
    n = np.asarray(g["normal"], float)
    return GroundPlane(n / np.linalg.norm(n), float(g["offset"]))


def scene_field(scene):
    """Analytic :class:`SceneField` of a scene: objects unioned with the ground."""
    ground = scene_ground_plane(scene)
    return SceneField(scene_objects(scene), ground if ground is not None else scene_ground_sdf(scene),
                      bound_radius=None)


def scene_prims(scene):
    return np.concatenate([scene_objects(scene).prims(), scene_ground_sdf(scene).prims()], axis=0)


# --------------------------------------------------------------------------
# oracle renderer

def _analytic_normals(prims, x, h=1e-6):
    g = np.zeros_like(x)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        g[:, k] = (kernels.analytic_sdf(prims, x + e) - kernels.analytic_sdf(prims, x - e)) / (2 * h)
    return g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)


def oracle_hits(scene, camera, uv, n_steps=4096):
    """Exact first intersections of camera rays through ``uv``.

    Returns (t, x, normal, on_ground) with ``t = nan`` for misses.
    """
    prims = scene_prims(scene)
    rays = camera.rays(uv, radius=OBJECT_RADIUS)
    t = kernels.march_analytic(prims, rays.origins, rays.dirs, rays.near, rays.far, n_steps, 40)
    # beyond the object region only the ground can be hit
    rest = ~np.isfinite(t)
    if rest.any():
        gp = scene_ground_sdf(scene).prims()
        t0 = rays.far[rest]
        t[rest] = kernels.march_analytic(gp, rays.origins[rest], rays.dirs[rest], t0,
                                         t0 + FAR_GROUND, n_steps, 40)
    ok = np.isfinite(t)
    x = rays.origins + np.where(ok, t, 0.0)[:, None] * rays.dirs
    n = np.zeros_like(x)
    n[ok] = _analytic_normals(prims, x[ok])
    obj = np.asarray(scene_objects(scene).sdf(x))
    ground = np.asarray(scene_ground_sdf(scene).sdf(x))
    on_ground = ok & (np.abs(ground) <= np.abs(obj))
    return t, x, n, on_ground


def oracle_visibility(scene, x, n, light, n_steps=4096):
    """1 where the segment from ``x`` to the light is unoccluded and lit."""
    prims = scene_prims(scene)
    l, _ = light.at(x)
    start = x + 1e-4 * n
    if light.kind == "point":
        tmax = np.linalg.norm(light.position - start, axis=-1)
    else:
        tmax = np.full(len(x), 3.0)
    t = kernels.march_analytic(prims, start, l, 0.0, tmax, n_steps, 20)
    facing = np.sum(l * n, axis=-1) > 0
    return (facing & ~np.isfinite(t)).astype(np.float64)


def oracle_radiance(scene, x, n, on_ground, light, kind, visibility=None):
    """Per-point value of a binary shadow or linear RGB image."""
    vis = oracle_visibility(scene, x, n, light) if visibility is None else visibility
    if kind == "binary":
        return vis
    l, L = light.at(x)
    cos = np.maximum(np.sum(l * n, axis=-1), 0.0)
    alb = np.where(on_ground[:, None], np.asarray(scene["ground_albedo"], float),
                   np.asarray(scene["albedo"], float))
    return alb * (vis * L * cos)[:, None]


def oracle_pixels(scene, camera, uv, light, kind="binary", supersample=1, pixel_size=1.0):
    """Oracle values of square pixels centred at ``uv`` (N, 2).

    Each pixel averages ``supersample**2`` stratified sub-rays; missed rays
    contribute 0.  Returns (N,) for binary and (N, 3) for RGB values.
    """
    lights = light if isinstance(light, (list, tuple)) else [light]
    uv = np.asarray(uv, dtype=np.float64)
    k = int(supersample)
    sub = (np.arange(k) + 0.5) / k - 0.5
    su, sv = np.meshgrid(sub, sub)
    offs = np.stack([su.ravel(), sv.ravel()], axis=-1) * pixel_size
    pts = (uv[:, None, :] + offs[None]).reshape(-1, 2)
    t, x, n, on_ground = oracle_hits(scene, camera, pts)
    ok = np.isfinite(t)
    chans = 1 if kind == "binary" else 3
    val = np.zeros((len(pts), chans))
    for lt in lights:
        r = oracle_radiance(scene, x[ok], n[ok], on_ground[ok], lt, kind)
        val[ok] += r.reshape(-1, chans)
    val = val.reshape(len(uv), k * k, chans).mean(axis=1)
    if kind == "binary":
        return np.minimum(val[:, 0], 1.0)
    return val


def oracle_render(scene, camera, light, kind="binary", supersample=1, level=1):
    """Render a (H, W) binary or (H, W, 3) RGB raster of an analytic scene.

    ``level`` renders a downsampled pyramid level (pixels ``level`` wide).
    """
    w, h = camera.width // level, camera.height // level
    val = oracle_pixels(scene, camera, camera.pixel_centers(level), light, kind, supersample,
                        float(level))
    return val.reshape(h, w) if kind == "binary" else val.reshape(h, w, 3)


def oracle_depth_normal(scene, camera, level=1):
    """Depth (t along the ray), normals and foreground mask of the scene."""
    uv = camera.pixel_centers(level)
    t, x, n, on_ground = oracle_hits(scene, camera, uv)
    w, h = camera.width // level, camera.height // level
    fg = np.isfinite(t) & ~on_ground
    return t.reshape(h, w), n.reshape(h, w, 3), fg.reshape(h, w)


def oracle_albedo(scene, camera, level=1):
    """Diffuse albedo of the first surface hit per pixel and the hit mask."""
    uv = camera.pixel_centers(level)
    t, _, _, on_ground = oracle_hits(scene, camera, uv)
    w, h = camera.width // level, camera.height // level
    alb = np.where(on_ground[:, None], np.asarray(scene["ground_albedo"], float),
                   np.asarray(scene["albedo"], float))
    return alb.reshape(h, w, 3), np.isfinite(t).reshape(h, w)


# --------------------------------------------------------------------------
# light sampling

def sample_lights(rng, n, light_type="directional", radius=2.5, min_elevation_z=0.25):
    """Lights uniform over the upper hemisphere (restricted to z >= min z).

    Point lights sit on a shell of ``radius`` with ``L_p = radius**2`` so
    the intensity at the scene centre is 1.
    """
    z = rng.uniform(min_elevation_z, 1.0, n)
    phi = rng.uniform(0.0, 2 * np.pi, n)
    r = np.sqrt(1 - z * z)
    dirs = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)
    if light_type == "directional":
        return [LightSource.directional(d, 1.0) for d in dirs]
    if light_type == "point":
        return [LightSource.point(radius * d, radius ** 2) for d in dirs]
    raise ValueError(f"unknown light type {light_type!r}")


# --------------------------------------------------------------------------
# raster I/O

def write_pfm(path, img):
    img = np.asarray(img, dtype=np.float32)
    color = img.ndim == 3
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"PF\n" if color else b"Pf\n")
        fh.write(f"{w} {h}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.ascontiguousarray(img[::-1]).astype("<f4").tobytes())


def read_pfm(path):
    with open(path, "rb") as fh:
        head = fh.readline().strip()
        if head not in (b"PF", b"Pf"):
            raise DatasetError(f"{path}: not a PFM file")
        w, h = (int(v) for v in fh.readline().split())
        scale = float(fh.readline())
        data = np.frombuffer(fh.read(), dtype="<f4" if scale < 0 else ">f4")
    chans = 3 if head == b"PF" else 1
    if data.size != w * h * chans:
        raise DatasetError(f"{path}: expected {w * h * chans} values, found {data.size}")
    img = data.reshape((h, w, chans) if chans == 3 else (h, w))[::-1]
    return img.astype(np.float64)


def srgb_to_linear(c):
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(c):
    c = np.clip(np.asarray(c, dtype=np.float64), 0, 1)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * c ** (1 / 2.4) - 0.055)


def write_png(path, img, srgb=False):
    img = np.asarray(img, dtype=np.float64)
    if srgb:
        img = linear_to_srgb(img)
    Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)).save(path)


def read_png(path, srgb=True):
    a = np.asarray(Image.open(path), dtype=np.float64) / 255.0
    if a.ndim == 3:
        a = a[..., :3]
        return srgb_to_linear(a) if srgb else a
    return a


# --------------------------------------------------------------------------
# datasets

@dataclass
class SceneDataset:
    camera: CameraModel
    ground: GroundPlane | None
    images: list
    lights: list
    kind: str
    scene: dict | None = None
    ground_depth: np.ndarray | None = None
    path: str | None = None

    def __len__(self):
        return len(self.images)


def _light_record(light):
    if light.kind == "directional":
        return {"type": "directional", "direction": light.direction.tolist(),
                "intensity": float(light.intensity)}
    return {"type": "point", "position": light.position.tolist(), "intensity": float(light.intensity)}


def _light_from(rec, where):
    try:
        kind = rec["type"]
        if kind == "directional":
            d = np.asarray(rec["direction"], float)
            if d.shape != (3,) or abs(np.linalg.norm(d) - 1) > 1e-6:
                raise DatasetError(f"{where}.direction: light direction must be a unit 3-vector")
            return LightSource.directional(d, float(rec["intensity"]))
        if kind == "point":
            return LightSource.point(np.asarray(rec["position"], float), float(rec["intensity"]))
    except KeyError as e:
        raise DatasetError(f"{where}: missing field {e.args[0]!r}") from None
    except ValueError as e:
        if isinstance(e, DatasetError):
            raise
        raise DatasetError(f"{where}: {e}") from None
    raise DatasetError(f"{where}.type: unknown light type {kind!r}")


def generate_dataset(out_dir, scene="sphere-plane", n_lights=16, light_type="directional",
                     kind="binary", resolution=64, seed=0, lights_per_image=1,
                     point_radius=2.5, supersample=1):
    """Render a dataset of ``n_lights`` images to ``out_dir``; return the manifest path."""
    if n_lights < 1:
        raise ValueError("n_lights must be at least 1")
    if kind not in ("binary", "rgb"):
        raise ValueError(f"unknown image type {kind!r}")
    desc = builtin_scene(scene) if isinstance(scene, str) else copy.deepcopy(scene)
    rng = np.random.default_rng(seed)
    camera = _camera_for(resolution, resolution)
    img_dir = os.path.join(out_dir, "images")
    try:
        os.makedirs(img_dir, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create {img_dir}: {e.strerror}") from e
    records = []
    for k in range(n_lights):
        lights = sample_lights(rng, lights_per_image, light_type, radius=point_radius)
        img = oracle_render(desc, camera, lights, kind, supersample=supersample)
        name = f"{k:03d}.png" if kind == "binary" else f"{k:03d}.pfm"
        path = os.path.join(img_dir, name)
        try:
            if kind == "binary":
                write_png(path, img)
            else:
                write_pfm(path, img)
        except OSError as e:
            raise OSError(f"cannot write {path}: {e}") from e
        records.append({"file": f"images/{name}", "lights": [_light_record(l) for l in lights]})

    ground = desc["ground"]
    ground_rec = {"normal": [0.0, 0.0, 1.0], "offset": float(ground.get("offset", 0.0)),
                  "depth_file": None}
    if ground["type"] == "plane":
        ground_rec["normal"] = list(map(float, ground["normal"]))
    else:
        depth = _ground_depth(desc, camera)
        write_pfm(os.path.join(out_dir, "ground_depth.pfm"), depth)
        ground_rec["depth_file"] = "ground_depth.pfm"
        ground_rec["normal"] = None
    manifest = {"version": MANIFEST_VERSION, "type": kind, "resolution": [resolution, resolution],
                "camera": camera.to_dict(), "ground": ground_rec, "scene": desc,
                "images": records, "seed": int(seed)}
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def _ground_depth(scene, camera):
    # ray parameter of the ground surface alone, per pixel
    prims = scene_ground_sdf(scene).prims()
    rays = camera.rays(camera.pixel_centers())
    t = kernels.march_analytic(prims, rays.origins, rays.dirs, 0.0, FAR_GROUND, 16384, 40)
    return np.nan_to_num(t, nan=0.0).reshape(camera.height, camera.width)


def _field(d, key, where):
    if key not in d:
        raise DatasetError(f"{where}: missing field {key!r}")
    return d[key]


def load_dataset(path):
    """Load and validate a dataset directory (or its manifest file)."""
    mpath = os.path.join(path, "manifest.json") if os.path.isdir(path) else path
    root = os.path.dirname(os.path.abspath(mpath))
    if not os.path.exists(mpath):
        raise DatasetError(f"{mpath}: manifest not found")
    try:
        with open(mpath) as fh:
            man = json.load(fh)
    except json.JSONDecodeError as e:
        raise DatasetError(f"{mpath}: invalid JSON ({e.msg} at line {e.lineno})") from None
    if not isinstance(man, dict):
        raise DatasetError(f"{mpath}: manifest must be a JSON object")
    version = _field(man, "version", "manifest")
    if version != MANIFEST_VERSION:
        raise DatasetError(f"manifest.version: unsupported version {version!r}")
    kind = _field(man, "type", "manifest")
    if kind not in ("binary", "rgb"):
        raise DatasetError(f"manifest.type: expected 'binary' or 'rgb', got {kind!r}")
    res = _field(man, "resolution", "manifest")
    try:
        camera = CameraModel.from_dict(_field(man, "camera", "manifest"))
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"manifest.camera: {e}") from None
    if [camera.width, camera.height] != list(res):
        raise DatasetError(f"manifest.resolution: {res} does not match camera "
                           f"{camera.width}x{camera.height}")
    g = _field(man, "ground", "manifest")
    ground, gdepth = None, None
    if g.get("depth_file"):
        gpath = os.path.join(root, g["depth_file"])
        if not os.path.exists(gpath):
            raise DatasetError(f"manifest.ground.depth_file: {gpath} not found")
        gdepth = read_pfm(gpath)
    else:
        try:
            ground = GroundPlane(np.asarray(_field(g, "normal", "manifest.ground"), float),
                                 float(_field(g, "offset", "manifest.ground")))
        except ValueError as e:
            if isinstance(e, DatasetError):
                raise
            raise DatasetError(f"manifest.ground.normal: {e}") from None
    records = _field(man, "images", "manifest")
    if not records:
        raise DatasetError("manifest.images: dataset has no images")
    images, lights = [], []
    for k, rec in enumerate(records):
        where = f"manifest.images[{k}]"
        fpath = os.path.join(root, _field(rec, "file", where))
        if not os.path.exists(fpath):
            raise DatasetError(f"{where}.file: {fpath} not found")
        img = read_pfm(fpath) if fpath.endswith(".pfm") else read_png(fpath)
        if img.shape[:2] != (camera.height, camera.width):
            raise DatasetError(f"{where}: image {fpath} is {img.shape[1]}x{img.shape[0]}, "
                               f"expected {camera.width}x{camera.height}")
        if kind == "binary":
            if img.ndim == 3:
                img = img.mean(axis=-1)
            if np.any(np.minimum(np.abs(img), np.abs(img - 1)) > 1e-3):
                raise DatasetError(f"{where}: binary image {fpath} has values outside {{0, 1}}")
            img = np.round(img)
        elif img.ndim != 3:
            img = np.repeat(img[..., None], 3, axis=-1)
        lrecs = _field(rec, "lights", where)
        if not lrecs:
            raise DatasetError(f"{where}.lights: image has no light")
        lights.append([_light_from(lr, f"{where}.lights[{i}]") for i, lr in enumerate(lrecs)])
        images.append(img)
    return SceneDataset(camera, ground, images, lights, kind, man.get("scene"), gdepth, root)
