"""Optimisation loop: batches, learning-rate schedule, coarse-to-fine, checkpoints."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import diffengine as ad
from .fields import (MaterialNetwork, NetworkField, SceneField, SdfNetwork, eikonal_loss,
                     load_checkpoint, save_checkpoint, sphere_points)
from .optim import Adam, clip_grad_norm
from .render import RenderOptions, render_pixels
from .shading import rgb_loss, total_loss
from .shadowrender import LightBatch, shadow_loss


class TrainingAborted(RuntimeError):
    """Raised when the loss or gradient became non-finite."""

    def __init__(self, msg, checkpoint=None):
        super().__init__(msg)
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    mode: str = "shadow"
    iterations: int = 5000
    batch_images: int = 4
    pixels_per_image: int = 256
    lr_peak: float = 1e-3
    warmup_iters: int | None = None
    lr_min: float = 5e-5
    eikonal_weight: float = 0.1
    eikonal_samples: int = 512
    photometric_weight: float = 1.0
    ground_weight: float = 1.0
    coarse_to_fine: bool = True
    c2f_fractions: list = field(default_factory=lambda: [0.1, 0.2, 0.4])
    grad_clip: float = 10.0
    seed: int = 0
    precision: str = "float32"
    net_depth: int = 4
    net_width: int = 64
    n_freqs: int = 6
    init_radius: float = 0.5
    init_s: float = 20.0
    material_depth: int = 4
    material_width: int = 64
    n_uniform: int = 80
    n_importance: int = 64
    boundary: bool = True
    diff_intersection: bool = True
    walk_step: float | None = None
    checkpoint_every: int = 500
    log_every: int = 10

    def __post_init__(self):
        if self.mode not in ("shadow", "rgb"):
            raise ValueError(f"mode must be 'shadow' or 'rgb', got {self.mode!r}")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")
        for name in ("iterations", "batch_images", "pixels_per_image", "eikonal_samples"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr_peak <= 0 or self.lr_min < 0:
            raise ValueError("learning rates must be positive")
        if self.warmup_iters is not None and not 0 <= self.warmup_iters < self.iterations:
            raise ValueError("warmup_iters must be smaller than iterations")

    @property
    def warmup(self):
        if self.warmup_iters is not None:
            return self.warmup_iters
        return max(1, min(500, self.iterations // 10))

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown training options {sorted(unknown)}")
        return cls(**d)

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def lr_at(step, config: TrainConfig):
    """Linear warmup from 0 to ``lr_peak`` then cosine decay to ``lr_min``."""
    w = config.warmup
    if step < w:
        return config.lr_peak * step / w
    span = max(config.iterations - w, 1)
    progress = min(max((step - w) / span, 0.0), 1.0)
    return config.lr_min + 0.5 * (config.lr_peak - config.lr_min) * (1 + math.cos(math.pi * progress))


def pyramid_factor(step, config: TrainConfig, resolution):
    """Downsampling factor at ``step``: 8, 4, 2 then 1 (full resolution).

    The factor halves at the configured fractions of the run and never
    exceeds what divides the image size.
    """
    if not config.coarse_to_fine:
        return 1
    frac = step / config.iterations
    levels = [8, 4, 2]
    factor = 1
    for lvl, bound in zip(levels, config.c2f_fractions):
        if frac < bound:
            factor = lvl
            break
    while factor > 1 and resolution % factor:
        factor //= 2
    return factor


def area_downsample(img, factor):
    if factor == 1:
        return img
    h, w = img.shape[:2]
    return img.reshape(h // factor, factor, w // factor, factor, *img.shape[2:]).mean(axis=(1, 3))


@dataclass
class PixelBatch:
    """Pixels of one training step (one row per pixel)."""

    image_ids: np.ndarray
    pixels: np.ndarray
    uv: np.ndarray
    pixel_size: float
    target: np.ndarray
    lights: list


def sample_batch(dataset, rng, factor=1, batch_images=4, pixels_per_image=256, pyramids=None):
    """Uniform images (without replacement) and pixels of one pyramid level."""
    n_img = len(dataset.images)
    k = min(batch_images, n_img)
    ids = np.sort(rng.choice(n_img, size=k, replace=False))
    h, w = dataset.camera.height // factor, dataset.camera.width // factor
    npx = h * w
    image_ids, pix, targets = [], [], []
    for i in ids:
        flat = rng.choice(npx, size=pixels_per_image, replace=pixels_per_image > npx)
        img = pyramids[factor][i] if pyramids is not None else area_downsample(dataset.images[i], factor)
        targets.append(img.reshape(npx, *img.shape[2:])[flat])
        pix.append(np.stack([flat % w, flat // w], axis=-1))
        image_ids.append(np.full(pixels_per_image, i))
    image_ids = np.concatenate(image_ids)
    pix = np.concatenate(pix)
    uv = (pix + 0.5) * factor
    slots = max(len(ls) for ls in dataset.lights)
    lights = []
    for s in range(slots):
        per = [ls[s] if s < len(ls) else ls[0].scaled(0.0) for ls in dataset.lights]
        lights.append(LightBatch.gather(per, image_ids))
    return PixelBatch(image_ids, pix, uv.astype(np.float64), float(factor),
                      np.concatenate(targets), lights)


class _BoundMaterial:
    def __init__(self, mat, P):
        self.mat = mat
        self.P = P

    def forward(self, x, n, feature):
        return self.mat.forward(x, n, feature, self.P)


def build_models(config: TrainConfig, feature_dim=None):
    dtype = np.dtype(config.precision)
    net = SdfNetwork(depth=config.net_depth, width=config.net_width, n_freqs=config.n_freqs,
                     init_radius=config.init_radius, init_s=config.init_s, seed=config.seed,
                     dtype=dtype)
    mat = None
    if config.mode == "rgb":
        mat = MaterialNetwork(feature_dim=net.feature_dim, depth=config.material_depth,
                              width=config.material_width, seed=config.seed + 1, dtype=dtype)
    return net, mat


def ground_points(dataset, rng, n):
    """World points on a known non-planar ground (from its depth raster)."""
    cam = dataset.camera
    depth = dataset.ground_depth
    valid = np.flatnonzero(depth.ravel() > 0)
    pick = rng.choice(valid, size=n, replace=len(valid) < n)
    uv = np.stack([pick % cam.width + 0.5, pick // cam.width + 0.5], axis=-1)
    rays = cam.rays(uv)
    return rays.origins + depth.ravel()[pick, None] * rays.dirs


def _render_options(config):
    return RenderOptions(boundary=config.boundary, diff_intersection=config.diff_intersection,
                         n_uniform=config.n_uniform, n_importance=config.n_importance,
                         walk_step=config.walk_step)


def training_step(net, mat, dataset, batch, config, rng, frozen=None):
    """Loss terms and the flat gradient (SDF then material parameters) of one step.

    ``frozen`` is passed to :func:`render_pixels` to pin the sampling choices.
    """
    tape = ad.Tape()
    Pg = net.params.leaves(tape)
    Pm = mat.params.leaves(tape) if mat is not None else {}
    net_field = NetworkField(net, Pg)
    field_ = SceneField(net_field, dataset.ground)
    material = _BoundMaterial(mat, Pm) if mat is not None else None
    r = render_pixels(field_, dataset.camera, batch.uv, batch.pixel_size, batch.lights,
                      config.mode, material, _render_options(config), tape=tape, frozen=frozen)
    valid = np.flatnonzero(r.valid)
    terms = {}
    if valid.size and config.photometric_weight > 0:
        pred = r.value[valid]
        target = batch.target[valid]
        if config.mode == "shadow":
            photo = shadow_loss(pred, target)
        else:
            photo = rgb_loss(pred, target)
        photo = ad.mul(photo, config.photometric_weight)
    else:
        photo = 0.0

    m = config.eikonal_samples
    pts = [sphere_points(rng, m - m // 2)]
    surf = r.hit.x[r.hit.valid]
    if len(surf):
        pick = rng.integers(0, len(surf), m // 2)
        pts.append(surf[pick] + rng.normal(scale=0.01, size=(m // 2, 3)))
    else:
        pts.append(sphere_points(rng, m // 2))
    eik = eikonal_loss(net_field, np.concatenate(pts), tape=tape)

    pin = None
    if dataset.ground is None and dataset.ground_depth is not None:
        gp = ground_points(dataset, rng, 256)
        pin = ad.mean(ad.absolute(net_field.sdf(gp)))
    loss = total_loss(photo, eik, config.eikonal_weight, pin, config.ground_weight)
    names_g = [n for n, _ in net.params.layout]
    names_m = [n for n, _ in mat.params.layout] if mat is not None else []
    leaves = [Pg[n] for n in names_g] + [Pm[n] for n in names_m]
    grads = tape.backward(loss, leaves)
    gg = net.params.flatten_grads(dict(zip(names_g, grads[:len(names_g)])))
    parts = [gg]
    if mat is not None:
        parts.append(mat.params.flatten_grads(dict(zip(names_m, grads[len(names_g):]))))
    terms["loss"] = float(ad.value_of(loss))
    terms["photometric"] = float(ad.value_of(photo))
    terms["eikonal"] = float(ad.value_of(eik))
    if pin is not None:
        terms["ground"] = float(ad.value_of(pin))
    terms["boundary"] = int(r.boundary.is_boundary.sum()) if r.boundary is not None else 0
    terms["valid"] = int(valid.size)
    return terms, np.concatenate(parts)


# --------------------------------------------------------------------------
# checkpoints

def _rng_state(rng):
    return rng.bit_generator.state


def save_training_checkpoint(path, net, mat, opt, step, config, rng, extra=None):
    arrays = {"sdf_params": net.params.flat, "adam_m": opt.m, "adam_v": opt.v,
              "adam_t": np.array(opt.t, dtype=np.int64)}
    if mat is not None:
        arrays["material_params"] = mat.params.flat
    meta = {"step": int(step), "config": config.to_dict(), "config_hash": config.digest(),
            "sdf_network": net.config(), "sdf_layout": [[n, list(s)] for n, s in net.params.layout],
            "material_network": mat.config() if mat is not None else None,
            "rng_state": _rng_state(rng)}
    if extra:
        meta.update(extra)
    save_checkpoint(path, arrays, meta)


def load_model(path):
    """Rebuild (sdf network, material network or None, meta) from a checkpoint."""
    arrays, meta = load_checkpoint(path)
    cfg = meta["sdf_network"]
    net = SdfNetwork(depth=cfg["depth"], width=cfg["width"], n_freqs=cfg["n_freqs"],
                     skips=cfg["skips"], feature_dim=cfg["feature_dim"], beta=cfg["beta"],
                     init_radius=cfg["init_radius"], s_scale=cfg["s_scale"],
                     params=arrays["sdf_params"])
    mat = None
    if meta.get("material_network") is not None:
        mc = meta["material_network"]
        mat = MaterialNetwork(feature_dim=mc["feature_dim"], depth=mc["depth"], width=mc["width"],
                              params=arrays["material_params"])
    return net, mat, meta


# --------------------------------------------------------------------------
# training loop

LOG_FIELDS = ["step", "loss", "photometric", "eikonal", "ground", "lr", "sharpness", "factor",
              "boundary", "valid", "grad_norm"]


def train(dataset, config: TrainConfig, out_dir, resume=None, log=print):
    """Optimise the networks on ``dataset``; returns a summary dict.

    Writes ``out_dir/checkpoint.ckpt`` (latest), periodic
    ``out_dir/step_NNNNNN.ckpt`` files and ``out_dir/log.csv``.  A
    non-finite loss or gradient stops the run and leaves the last good
    state in ``out_dir/last_good.ckpt`` before raising
    :class:`TrainingAborted`.
    """
    if (dataset.kind == "binary") != (config.mode == "shadow"):
        raise ValueError(f"dataset of type {dataset.kind!r} does not match mode {config.mode!r}")
    os.makedirs(out_dir, exist_ok=True)
    if resume is not None:
        net, mat, meta = load_model(resume)
        arrays, _ = load_checkpoint(resume)
        if meta["config_hash"] != config.digest():
            log(f"warning: resuming with a different configuration ({meta['config_hash']})")
        step0 = int(meta["step"])
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng_state"]
    else:
        net, mat = build_models(config)
        step0 = 0
        rng = np.random.default_rng(config.seed)
        arrays = None
    flat_parts = [net.params.flat] + ([mat.params.flat] if mat is not None else [])
    sizes = [p.size for p in flat_parts]
    opt = Adam(sum(sizes))
    if arrays is not None:
        opt.load_state({"m": arrays["adam_m"], "v": arrays["adam_v"], "t": arrays["adam_t"]})

    res = dataset.camera.width
    pyramids = {}
    log_path = os.path.join(out_dir, "log.csv")
    mode = "a" if resume is not None and os.path.exists(log_path) else "w"
    fh = open(log_path, mode, newline="")
    writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS, extrasaction="ignore")
    if mode == "w":
        writer.writeheader()
    latest = os.path.join(out_dir, "checkpoint.ckpt")
    last_good = os.path.join(out_dir, "last_good.ckpt")
    terms = {}
    try:
        for step in range(step0, config.iterations):
            factor = pyramid_factor(step, config, res)
            if factor not in pyramids:
                pyramids[factor] = [area_downsample(im, factor) for im in dataset.images]
            snapshot = (net.params.flat.copy(), None if mat is None else mat.params.flat.copy(),
                        opt.m.copy(), opt.v.copy(), opt.t, _rng_state(rng))
            batch = sample_batch(dataset, rng, factor, config.batch_images,
                                 config.pixels_per_image, pyramids)
            terms, grad = training_step(net, mat, dataset, batch, config, rng)
            if not (np.isfinite(terms["loss"]) and np.all(np.isfinite(grad))):
                _restore(net, mat, opt, snapshot)
                rng.bit_generator.state = snapshot[5]
                save_training_checkpoint(last_good, net, mat, opt, step, config, rng)
                raise TrainingAborted(f"non-finite loss at step {step}", last_good)
            grad, gnorm = clip_grad_norm(grad, config.grad_clip)
            lr = lr_at(step, config)
            _adam_step(opt, flat_parts, grad, lr)
            terms.update(step=step + 1, lr=lr, factor=factor, grad_norm=gnorm,
                         sharpness=float(np.asarray(ad.value_of(net.sharpness()))))
            if (step + 1) % config.log_every == 0 or step + 1 == config.iterations:
                writer.writerow({k: _fmt(v) for k, v in terms.items()})
                fh.flush()
                log(f"step {step + 1:6d}  loss {terms['loss']:.5f}  photo {terms['photometric']:.5f}"
                    f"  eik {terms['eikonal']:.5f}  lr {lr:.2e}  s {terms['sharpness']:.1f}"
                    f"  level 1/{factor}  boundary {terms['boundary']}")
            if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                save_training_checkpoint(os.path.join(out_dir, f"step_{step + 1:06d}.ckpt"),
                                         net, mat, opt, step + 1, config, rng)
        save_training_checkpoint(latest, net, mat, opt, config.iterations, config, rng)
    finally:
        fh.close()
    return {"checkpoint": latest, "net": net, "material": mat, "final": terms}


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _adam_step(opt, parts, grad, lr):
    # one optimizer over the concatenated vector, written back per network
    theta = np.concatenate([p.astype(np.float64) for p in parts])
    opt.step(theta, grad.astype(np.float64), lr)
    start = 0
    for p in parts:
        p[...] = theta[start:start + p.size].astype(p.dtype)
        start += p.size


def _restore(net, mat, opt, snap):
    net.params.flat[...] = snap[0]
    if mat is not None:
        mat.params.flat[...] = snap[1]
    opt.m[...] = snap[2]
    opt.v[...] = snap[3]
    opt.t = snap[4]


# --------------------------------------------------------------------------
# finite-difference gradient check

def _check_dataset(mode, seed, resolution=32):
    from .scenes import (SceneDataset, _camera_for, builtin_scene, oracle_render, sample_lights,
                         scene_ground_plane)

    scene = builtin_scene("sphere-plane")
    camera = _camera_for(resolution, resolution)
    rng = np.random.default_rng(seed)
    kind = "binary" if mode == "shadow" else "rgb"
    lights = sample_lights(rng, 2, "directional" if mode == "shadow" else "point")
    images = [oracle_render(scene, camera, lt, kind) for lt in lights]
    return SceneDataset(camera, scene_ground_plane(scene), images, [[lt] for lt in lights], kind,
                        scene)


def _check_pixels(net, dataset, rng):
    """Three pixels of one image: a boundary pixel, an object pixel and a ground pixel."""
    from .raycast import ray_march, surface_walk

    cam = dataset.camera
    uv = cam.pixel_centers()
    fd = SceneField(NetworkField(net), dataset.ground).detached()
    rays = cam.rays(uv)
    hit = ray_march(fd, rays)
    info = surface_walk(fd, cam, rays, hit, uv, 1.0)
    groups = [np.flatnonzero(info.is_boundary),
              np.flatnonzero(hit.hit_object & ~info.is_boundary),
              np.flatnonzero(hit.valid & hit.hit_ground & ~info.is_boundary)]
    return np.array([rng.choice(g) for g in groups if len(g)])


def gradient_check(seed=0, mode="shadow", n_dirs=6, h=1e-5, log=None):
    """Compare tape gradients of the total loss with central differences.

    A small float64 network (slightly perturbed from its initialisation) is
    evaluated on a 3-pixel batch: one boundary, one object and one ground
    pixel.  The sampling decisions are frozen at the base parameters so both
    sides differentiate the same smooth function.  Directional derivatives
    along ``n_dirs`` random unit directions plus the sharpness coordinate are
    compared; returns the maximum relative error.
    """
    config = TrainConfig(mode=mode, precision="float64", net_depth=3, net_width=32, n_freqs=4,
                         material_depth=2, material_width=16, n_uniform=24, n_importance=16,
                         eikonal_samples=32, seed=seed, iterations=1)
    dataset = _check_dataset(mode, seed)
    rng = np.random.default_rng(seed)
    net, mat = build_models(config)
    net.params.flat[...] += 0.01 * rng.standard_normal(net.params.flat.size)
    if mat is not None:
        mat.params.flat[...] += 0.01 * rng.standard_normal(mat.params.flat.size)
    pix = _check_pixels(net, dataset, rng)
    cam = dataset.camera
    batch = PixelBatch(np.zeros(len(pix), dtype=int), np.stack([pix % cam.width, pix // cam.width], -1),
                       cam.pixel_centers()[pix], 1.0,
                       dataset.images[0].reshape(cam.width * cam.height, -1)[pix].squeeze(-1)
                       if mode == "shadow" else dataset.images[0].reshape(-1, 3)[pix],
                       [LightBatch.gather(dataset.lights[0], np.zeros(len(pix), dtype=int))])
    parts = [net.params.flat] + ([mat.params.flat] if mat is not None else [])
    theta0 = np.concatenate([p.copy() for p in parts])
    frozen = {}

    def evaluate(theta):
        start = 0
        for p in parts:
            p[...] = theta[start:start + p.size]
            start += p.size
        terms, grad = training_step(net, mat, dataset, batch, config,
                                    np.random.default_rng(seed + 1), frozen)
        return terms["loss"], grad, terms

    _, grad, terms = evaluate(theta0)
    dirs = rng.standard_normal((n_dirs, theta0.size))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    s_idx = _param_index(net, "s_raw")
    if s_idx is not None:
        e = np.zeros(theta0.size)
        e[s_idx] = 1.0
        dirs = np.concatenate([dirs, e[None]])
    worst = 0.0
    for d in dirs:
        lp = evaluate(theta0 + h * d)[0]
        lm = evaluate(theta0 - h * d)[0]
        fd = (lp - lm) / (2 * h)
        an = float(grad @ d)
        err = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
        worst = max(worst, err)
        if log is not None:
            log(f"  analytic {an: .10e}  numeric {fd: .10e}  rel {err:.2e}")
    evaluate(theta0)
    if log is not None:
        log(f"{mode}: boundary pixels {terms['boundary']}, loss {terms['loss']:.6f}")
    return worst


def _param_index(net, name):
    start = 0
    for n, shape in net.params.layout:
        size = int(np.prod(shape))
        if n == name:
            return start if size == 1 else None
        start += size
    return None
