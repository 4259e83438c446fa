"""Command-line entry point: gen-data, train, eval, mesh, relight, grad-check.

Every flag can also be given in a JSON config file (``--config``) using the
flag's long name with dashes replaced by underscores; flags on the command
line override the file.  The effective configuration is echoed at startup.

Exit codes: 0 success, 1 invalid input (bad flags, config or paths),
2 runtime failure (non-finite training abort, I/O error, failed check).

The number of BLAS/OpenMP threads follows ``SHADOWSDF_THREADS`` when set;
``--deterministic`` forces a single thread.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time

import numpy as np

THREADS_ENV = "SHADOWSDF_THREADS"


class UsageError(Exception):
    """Invalid command-line or config-file input (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# flag definitions

def _common(p):
    p.add_argument("--config", help="JSON file with option values")
    p.add_argument("--deterministic", action="store_true", default=None,
                   help="single-threaded run with fixed seeds")


def _add_train_flags(p):
    from .trainer import TrainConfig

    p.add_argument("--data", help="dataset directory or manifest")
    p.add_argument("--out", help="output directory for checkpoints and logs")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--iters", dest="iterations", type=int, help="number of iterations")
    skip = {"iterations"}
    for f in dataclasses.fields(TrainConfig):
        if f.name in skip:
            continue
        flag = "--" + f.name.replace("_", "-")
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        if isinstance(default, bool):
            p.add_argument(flag, dest=f.name, type=_parse_bool, metavar="{true,false}",
                           help=f"(default {str(default).lower()})")
        elif isinstance(default, list):
            p.add_argument(flag, dest=f.name, type=float, nargs="+", help=f"(default {default})")
        elif f.name == "walk_step":
            p.add_argument(flag, dest=f.name, type=float, help="surface-walk step (default auto)")
        elif f.name == "warmup_iters":
            p.add_argument(flag, dest=f.name, type=int, help="warmup steps (default min(500, iters/10))")
        elif f.name in ("mode", "precision"):
            choices = ["shadow", "rgb"] if f.name == "mode" else ["float32", "float64"]
            p.add_argument(flag, dest=f.name, choices=choices, help=f"(default {default})")
        else:
            p.add_argument(flag, dest=f.name, type=type(default), help=f"(default {default})")


def _parse_bool(s):
    v = str(s).lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {s!r}")


def build_parser():
    parser = _Parser(prog="shadowsdf", description="Neural SDF reconstruction from shadows.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render a synthetic dataset")
    _common(p)
    p.add_argument("--scene", help="built-in scene (sphere-plane, two-spheres, box-plane, bumpy-ground)")
    p.add_argument("--lights", type=int, help="number of images (default 16)")
    p.add_argument("--type", dest="kind", choices=["binary", "rgb"], help="image type (default binary)")
    p.add_argument("--light-type", choices=["directional", "point"],
                   help="default directional for binary, point for rgb")
    p.add_argument("--lights-per-image", type=int, help="lights summed per image (default 1)")
    p.add_argument("--res", dest="resolution", type=int, help="image size in pixels (default 64)")
    p.add_argument("--supersample", type=int, help="sub-rays per pixel side (default 1)")
    p.add_argument("--seed", type=int, help="light sampling seed (default 0)")
    p.add_argument("--out", help="output directory")

    p = sub.add_parser("train", help="optimise a reconstruction")
    _common(p)
    _add_train_flags(p)

    p = sub.add_parser("eval", help="depth, normal and hidden-geometry metrics")
    _common(p)
    p.add_argument("--ckpt", help="checkpoint file or training output directory")
    p.add_argument("--data", help="dataset the checkpoint was trained on")
    p.add_argument("--mesh-res", type=int, help="marching-cubes grid for coverage (default 128)")
    p.add_argument("--tau", type=float, help="coverage distance threshold (default 0.05)")
    p.add_argument("--out", help="optional CSV file for the metrics")
    p.add_argument("--save-rasters", help="directory for depth/normal PFM files")

    p = sub.add_parser("mesh", help="extract the zero level set as OBJ")
    _common(p)
    p.add_argument("--ckpt", help="checkpoint file or training output directory")
    p.add_argument("--res", dest="resolution", type=int, help="grid resolution (default 128)")
    p.add_argument("--out", help="output .obj path")

    p = sub.add_parser("relight", help="render the reconstruction under a new light")
    _common(p)
    p.add_argument("--ckpt", help="checkpoint file or training output directory")
    p.add_argument("--data", help="dataset providing camera and ground")
    p.add_argument("--light-dir", type=float, nargs=3, help="directional light (toward the light)")
    p.add_argument("--light-pos", type=float, nargs=3, help="point light position")
    p.add_argument("--intensity", type=float, help="light intensity (default 1, or r^2 for point)")
    p.add_argument("--image", type=int, help="reuse the light of this training image")
    p.add_argument("--out", help="output .png or .pfm path")

    p = sub.add_parser("grad-check", help="finite-difference check of the loss gradient")
    _common(p)
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("--mode", choices=["shadow", "rgb", "both"], help="loss variant (default both)")
    p.add_argument("--tol", type=float, help="maximum relative error (default 1e-4)")
    return parser


DEFAULTS = {
    "gen-data": {"scene": "sphere-plane", "lights": 16, "kind": "binary", "light_type": None,
                 "lights_per_image": 1, "resolution": 64, "supersample": 1, "seed": 0,
                 "out": None},
    "train": {"data": None, "out": None, "resume": None},
    "eval": {"ckpt": None, "data": None, "mesh_res": 128, "tau": 0.05, "out": None,
             "save_rasters": None},
    "mesh": {"ckpt": None, "resolution": 128, "out": None},
    "relight": {"ckpt": None, "data": None, "light_dir": None, "light_pos": None,
                "intensity": None, "image": None, "out": None},
    "grad-check": {"seed": 0, "mode": "both", "tol": 1e-4},
}


def effective_config(command, args):
    """Defaults, overridden by the config file, overridden by explicit flags."""
    from .trainer import TrainConfig

    cfg = dict(DEFAULTS[command])
    if command == "train":
        cfg.update(TrainConfig().to_dict())
    cfg["deterministic"] = False
    if args.config:
        try:
            with open(args.config) as fh:
                file_cfg = json.load(fh)
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {args.config} is not valid JSON: {exc}") from None
        if not isinstance(file_cfg, dict):
            raise UsageError(f"config file {args.config} must hold a JSON object")
        # allow the dashed flag spelling and the "iters" alias in files too
        file_cfg = {k.replace("-", "_"): v for k, v in file_cfg.items()}
        if "iters" in file_cfg:
            file_cfg["iterations"] = file_cfg.pop("iters")
        if "type" in file_cfg and command == "gen-data":
            file_cfg["kind"] = file_cfg.pop("type")
        if "res" in file_cfg and command in ("gen-data", "mesh"):
            file_cfg["resolution"] = file_cfg.pop("res")
        unknown = set(file_cfg) - set(cfg)
        if unknown:
            raise UsageError(f"unknown keys in {args.config}: {sorted(unknown)}")
        cfg.update(file_cfg)
    for k, v in vars(args).items():
        if k in ("command", "config") or v is None:
            continue
        cfg[k] = v
    return cfg


def _require(cfg, *names):
    for n in names:
        if cfg.get(n) in (None, ""):
            raise UsageError(f"missing required option --{n.replace('_', '-')}")


# --------------------------------------------------------------------------
# threads and determinism

def _thread_limit(cfg):
    if cfg.get("deterministic"):
        return 1
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
        if n < 1:
            raise UsageError(f"{THREADS_ENV} must be positive")
        return n
    return None


# --------------------------------------------------------------------------
# commands

def _ckpt_path(path):
    if path is None:
        raise UsageError("missing required option --ckpt")
    if os.path.isdir(path):
        path = os.path.join(path, "checkpoint.ckpt")
    if not os.path.isfile(path):
        raise UsageError(f"checkpoint not found: {path}")
    return path


def cmd_gen_data(cfg):
    from .scenes import generate_dataset

    _require(cfg, "out")
    light_type = cfg["light_type"] or ("directional" if cfg["kind"] == "binary" else "point")
    for name in ("lights", "resolution", "lights_per_image", "supersample"):
        if cfg[name] < 1:
            raise UsageError(f"--{name.replace('_', '-')} must be at least 1")
    try:
        path = generate_dataset(cfg["out"], cfg["scene"], cfg["lights"], light_type, cfg["kind"],
                                cfg["resolution"], cfg["seed"], cfg["lights_per_image"],
                                supersample=cfg["supersample"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(f"wrote {path}")
    return 0


def cmd_train(cfg):
    from .scenes import load_dataset
    from .trainer import TrainConfig, train

    _require(cfg, "data", "out")
    try:
        tc = TrainConfig.from_dict({k: cfg[k] for k in TrainConfig().to_dict()})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training options: {exc}") from None
    if cfg["resume"] is not None:
        _ckpt_path(cfg["resume"])
    dataset = load_dataset(cfg["data"])
    if (dataset.kind == "binary") != (tc.mode == "shadow"):
        raise UsageError(f"dataset of type {dataset.kind!r} does not match --mode {tc.mode}")
    t0 = time.time()
    result = train(dataset, tc, cfg["out"], resume=cfg["resume"])
    print(f"finished {tc.iterations} iterations in {time.time() - t0:.1f} s; "
          f"checkpoint {result['checkpoint']}")
    return 0


def _load_scene_fields(ckpt, dataset):
    from .fields import NetworkField, SceneField
    from .trainer import load_model, _BoundMaterial

    net, mat, meta = load_model(ckpt)
    field = SceneField(NetworkField(net), dataset.ground)
    material = _BoundMaterial(mat, mat.params.views()) if mat is not None else None
    return field, material, meta


def cmd_eval(cfg):
    from . import evaluate as ev
    from .scenes import (load_dataset, oracle_albedo, oracle_depth_normal, scene_field,
                         scene_objects, write_pfm)

    ckpt = _ckpt_path(cfg["ckpt"])
    _require(cfg, "data")
    dataset = load_dataset(cfg["data"])
    if dataset.scene is None:
        raise UsageError("dataset has no analytic scene description; metrics need ground truth")
    field, material, meta = _load_scene_fields(ckpt, dataset)
    depth, normals = ev.render_depth_normal(field, dataset.camera)
    gt_t, gt_n, gt_fg = oracle_depth_normal(dataset.scene, dataset.camera)
    gt = ev.DepthMap(gt_t, gt_fg)
    mask = depth.mask & gt.mask
    rows = [("step", meta["step"]),
            ("foreground_iou", float(mask.sum() / max((depth.mask | gt.mask).sum(), 1))),
            ("depth_l1_aligned", ev.depth_l1(depth, gt)),
            ("depth_l1_unaligned", ev.depth_l1(depth, gt, aligned=False)),
            ("normal_mae_deg", ev.normal_mae(normals, gt_n, mask))]
    mesh = ev.extract_mesh(field, cfg["mesh_res"])
    obj = scene_objects(dataset.scene)
    keep = _above_ground(dataset)
    cov = ev.invisible_coverage(mesh, obj, dataset.camera, tau=cfg["tau"],
                                scene_field=scene_field(dataset.scene), keep=keep)
    rows.append(("invisible_coverage", cov))
    if material is not None:
        alb, hit = ev.render_albedo(field, material, dataset.camera)
        gt_alb, gt_hit = oracle_albedo(dataset.scene, dataset.camera)
        rows.append(("albedo_within_15pct", ev.albedo_accuracy(alb, gt_alb, hit & gt_hit)))
    lines = ["metric,value"] + [f"{k},{v:.6g}" if isinstance(v, float) else f"{k},{v}"
                                for k, v in rows]
    print("\n".join(lines))
    if cfg["out"]:
        with open(cfg["out"], "w") as fh:
            fh.write("\n".join(lines) + "\n")
    if cfg["save_rasters"]:
        os.makedirs(cfg["save_rasters"], exist_ok=True)
        write_pfm(os.path.join(cfg["save_rasters"], "depth.pfm"), np.where(depth.mask, depth.t, 0))
        write_pfm(os.path.join(cfg["save_rasters"], "normal.pfm"), 0.5 * (normals + 1))
    return 0


def _above_ground(dataset, margin=0.01):
    g = dataset.ground
    if g is None:
        return None
    n = np.asarray(g.normal, float)
    return lambda p: p @ n - g.offset > margin


def cmd_mesh(cfg):
    from . import evaluate as ev
    from .fields import NetworkField
    from .trainer import load_model

    ckpt = _ckpt_path(cfg["ckpt"])
    _require(cfg, "out")
    net, _, _ = load_model(ckpt)
    mesh = ev.extract_mesh(NetworkField(net), cfg["resolution"])
    ev.write_obj(cfg["out"], mesh)
    print(f"wrote {cfg['out']}: {len(mesh.vertices)} vertices, {len(mesh.faces)} faces")
    return 0


def cmd_relight(cfg):
    from . import evaluate as ev
    from .scenes import load_dataset, write_pfm, write_png
    from .shadowrender import LightSource

    ckpt = _ckpt_path(cfg["ckpt"])
    _require(cfg, "data", "out")
    dataset = load_dataset(cfg["data"])
    field, material, _ = _load_scene_fields(ckpt, dataset)
    if material is None:
        raise UsageError("relighting needs a checkpoint trained in rgb mode")
    given = [cfg["light_dir"] is not None, cfg["light_pos"] is not None, cfg["image"] is not None]
    if sum(given) != 1:
        raise UsageError("give exactly one of --light-dir, --light-pos or --image")
    if cfg["image"] is not None:
        if not 0 <= cfg["image"] < len(dataset.lights):
            raise UsageError(f"--image must be in [0, {len(dataset.lights) - 1}]")
        light = dataset.lights[cfg["image"]]
    elif cfg["light_dir"] is not None:
        d = np.asarray(cfg["light_dir"], float)
        if np.linalg.norm(d) == 0:
            raise UsageError("--light-dir must be nonzero")
        light = LightSource.directional(d / np.linalg.norm(d), cfg["intensity"] or 1.0)
    else:
        pos = np.asarray(cfg["light_pos"], float)
        light = LightSource.point(pos, cfg["intensity"] or float(pos @ pos))
    img = ev.relight(field, material, dataset.camera, light)
    if cfg["out"].lower().endswith(".pfm"):
        write_pfm(cfg["out"], img)
    else:
        write_png(cfg["out"], img)
    print(f"wrote {cfg['out']}")
    return 0


def cmd_grad_check(cfg):
    from .trainer import gradient_check

    modes = ["shadow", "rgb"] if cfg["mode"] == "both" else [cfg["mode"]]
    worst = 0.0
    for m in modes:
        err = gradient_check(seed=cfg["seed"], mode=m)
        print(f"{m}: max relative error {err:.3e}")
        worst = max(worst, err)
    ok = worst < cfg["tol"]
    print(f"max relative error {worst:.3e} ({'pass' if ok else 'FAIL'}, tolerance {cfg['tol']:g})")
    return 0 if ok else 2


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "mesh": cmd_mesh,
            "relight": cmd_relight, "grad-check": cmd_grad_check}


def run(argv=None):
    """Run one subcommand; returns the process exit code."""
    from .scenes import DatasetError
    from .trainer import TrainingAborted

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 1
        cfg = effective_config(args.command, args)
        print(f"# {args.command} " + json.dumps(cfg, sort_keys=True), flush=True)
        limit = _thread_limit(cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    from threadpoolctl import threadpool_limits

    try:
        with threadpool_limits(limits=limit):
            return COMMANDS[args.command](cfg)
    except (UsageError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrainingAborted as exc:
        print(f"error: {exc}; last good state in {exc.checkpoint}", file=sys.stderr)
        return 2
    except (OSError, FloatingPointError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
