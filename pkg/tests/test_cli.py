import json
import os
import subprocess
import sys

import pytest

from shadowsdf import scenes as S
from shadowsdf.cli import THREADS_ENV, _thread_limit, run

TINY = {"iterations": 4, "batch_images": 1, "pixels_per_image": 16, "net_width": 16,
        "net_depth": 2, "n_uniform": 16, "n_importance": 8, "eikonal_samples": 32,
        "checkpoint_every": 2, "log_every": 1}


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "d"
    assert run(["gen-data", "--scene", "sphere-plane", "--lights", "3", "--type", "binary",
                "--res", "16", "--seed", "7", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


@pytest.fixture(scope="module")
def trained(data_dir, tiny_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_run")
    assert run(["train", "--config", str(tiny_config), "--data", str(data_dir), "--mode", "shadow",
                "--out", str(out)]) == 0
    return out


def test_gen_data_writes_dataset(data_dir):
    ds = S.load_dataset(str(data_dir))
    assert len(ds) == 3 and ds.camera.width == 16


def test_train_writes_checkpoint(trained):
    assert (trained / "checkpoint.ckpt").exists()
    assert (trained / "log.csv").exists()


def test_flags_override_config_file(data_dir, tiny_config, tmp_path, capsys):
    assert run(["train", "--config", str(tiny_config), "--data", str(data_dir), "--iters", "2",
                "--out", str(tmp_path)]) == 0
    head = capsys.readouterr().out.splitlines()[0]
    assert head.startswith("# train ")
    cfg = json.loads(head[len("# train "):])
    assert cfg["iterations"] == 2 and cfg["net_width"] == 16


def test_every_train_flag_has_a_config_key(data_dir, tmp_path, capsys):
    from shadowsdf.cli import build_parser, effective_config
    from shadowsdf.trainer import TrainConfig

    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices
    for name, p in sub.items():
        dests = {a.dest for a in p._actions if a.dest not in ("help", "config")}
        args = p.parse_args([])
        args.command = name
        args.config = None
        cfg = effective_config(name, args)
        assert dests <= set(cfg), (name, dests - set(cfg))
    assert set(TrainConfig().to_dict()) <= {a.dest for a in sub["train"]._actions}


def test_config_file_with_dashed_keys(data_dir, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"scene": "box-plane", "lights": 1, "res": 16, "light-type": "point",
                               "type": "rgb", "out": str(tmp_path / "d")}))
    assert run(["gen-data", "--config", str(cfg)]) == 0
    ds = S.load_dataset(str(tmp_path / "d"))
    assert ds.kind == "rgb" and ds.lights[0][0].kind == "point"


@pytest.mark.parametrize("argv", [
    ["train", "--bogus"],
    ["frobnicate"],
    [],
    ["eval", "--ckpt", "missing/"],
    ["gen-data", "--lights", "0", "--out", "x"],
    ["gen-data", "--scene", "teapot", "--out", "x"],
    ["train", "--data", "d"],
    ["train", "--iters", "-3", "--data", "d", "--out", "o"],
])
def test_usage_errors_exit_1(argv, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert run(argv) == 1
    assert capsys.readouterr().err


def test_missing_checkpoint_names_path(capsys):
    assert run(["eval", "--ckpt", "missing/"]) == 1
    assert "missing/" in capsys.readouterr().err


def test_bad_config_files(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run(["mesh", "--config", str(bad)]) == 1
    bad.write_text(json.dumps({"unknown_key": 1}))
    assert run(["mesh", "--config", str(bad)]) == 1
    assert "unknown_key" in capsys.readouterr().err
    assert run(["mesh", "--config", str(tmp_path / "none.json")]) == 1


def test_corrupt_dataset_exit_1(tmp_path, capsys):
    (tmp_path / "manifest.json").write_text("{}")
    assert run(["train", "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 1
    assert "version" in capsys.readouterr().err


def test_nan_abort_exit_2(data_dir, tiny_config, tmp_path, capsys):
    import shutil
    d = tmp_path / "d"
    shutil.copytree(data_dir, d)
    man = json.loads((d / "manifest.json").read_text())
    # an infinite light turns the loss non-finite on the first step
    for rec in man["images"]:
        rec["lights"][0]["intensity"] = float("inf")
    (d / "manifest.json").write_text(json.dumps(man))
    assert run(["train", "--config", str(tiny_config), "--data", str(d),
                "--out", str(tmp_path / "o")]) == 2
    assert "last good" in capsys.readouterr().err
    assert (tmp_path / "o" / "last_good.ckpt").exists()


def test_mode_mismatch_exit_1(data_dir, tiny_config, tmp_path, capsys):
    assert run(["train", "--config", str(tiny_config), "--data", str(data_dir), "--mode", "rgb",
                "--out", str(tmp_path)]) == 1
    assert "does not match" in capsys.readouterr().err


def test_eval_prints_metrics(trained, data_dir, tmp_path, capsys):
    out = tmp_path / "m.csv"
    assert run(["eval", "--ckpt", str(trained), "--data", str(data_dir), "--mesh-res", "32",
                "--out", str(out), "--save-rasters", str(tmp_path / "r")]) == 0
    rows = dict(line.split(",") for line in out.read_text().strip().splitlines()[1:])
    assert set(rows) == {"step", "foreground_iou", "depth_l1_aligned", "depth_l1_unaligned",
                         "normal_mae_deg", "invisible_coverage"}
    assert rows["step"] == "4"
    assert S.read_pfm(tmp_path / "r" / "depth.pfm").shape == (16, 16)


def test_mesh_writes_obj(trained, tmp_path, capsys):
    from shadowsdf.evaluate import read_obj
    out = tmp_path / "m.obj"
    assert run(["mesh", "--ckpt", str(trained), "--res", "32", "--out", str(out)]) == 0
    assert len(read_obj(out).faces) > 0


def test_relight_needs_rgb_checkpoint(trained, data_dir, tmp_path, capsys):
    assert run(["relight", "--ckpt", str(trained), "--data", str(data_dir), "--image", "0",
                "--out", str(tmp_path / "x.png")]) == 1


def test_relight_rgb(tmp_path, tiny_config, capsys):
    d = tmp_path / "d"
    assert run(["gen-data", "--lights", "2", "--type", "rgb", "--res", "16", "--out", str(d)]) == 0
    assert run(["train", "--config", str(tiny_config), "--data", str(d), "--mode", "rgb",
                "--material-width", "16", "--out", str(tmp_path / "r")]) == 0
    for extra, name in ((["--image", "1"], "a.pfm"), (["--light-dir", "0", "0", "1"], "b.png"),
                        (["--light-pos", "0", "1", "2", "--intensity", "3"], "c.pfm")):
        assert run(["relight", "--ckpt", str(tmp_path / "r"), "--data", str(d), *extra,
                    "--out", str(tmp_path / name)]) == 0
    assert S.read_pfm(tmp_path / "a.pfm").shape == (16, 16, 3)
    assert run(["relight", "--ckpt", str(tmp_path / "r"), "--data", str(d), "--image", "0",
                "--light-dir", "0", "0", "1", "--out", str(tmp_path / "z.png")]) == 1
    assert run(["relight", "--ckpt", str(tmp_path / "r"), "--data", str(d), "--image", "9",
                "--out", str(tmp_path / "z.png")]) == 1


def test_thread_limit(monkeypatch):
    monkeypatch.delenv(THREADS_ENV, raising=False)
    assert _thread_limit({}) is None
    monkeypatch.setenv(THREADS_ENV, "3")
    assert _thread_limit({}) == 3
    assert _thread_limit({"deterministic": True}) == 1
    monkeypatch.setenv(THREADS_ENV, "many")
    assert run(["grad-check", "--mode", "shadow"]) == 1


def test_deterministic_runs_are_byte_identical(data_dir, tiny_config, tmp_path):
    for name in ("a", "b"):
        assert run(["train", "--config", str(tiny_config), "--data", str(data_dir),
                    "--deterministic", "--out", str(tmp_path / name)]) == 0
    for f in ("checkpoint.ckpt", "step_000002.ckpt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_grad_check_command(capsys):
    assert run(["grad-check", "--seed", "1", "--mode", "shadow"]) == 0
    assert "max relative error" in capsys.readouterr().out
    assert run(["grad-check", "--seed", "1", "--mode", "shadow", "--tol", "1e-30"]) == 2


def test_console_entry_point(tmp_path):
    env = dict(os.environ, PYTHONPATH=os.pathsep.join(sys.path))
    r = subprocess.run([sys.executable, "-m", "shadowsdf.cli", "eval", "--ckpt", "missing/"],
                       capture_output=True, text=True, env=env)
    assert r.returncode == 1 and "checkpoint not found" in r.stderr
    r = subprocess.run([sys.executable, "-m", "shadowsdf.cli", "--help"], capture_output=True,
                       text=True, env=env)
    assert r.returncode == 0 and "grad-check" in r.stdout
