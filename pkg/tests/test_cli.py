import json
import math
import re
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from atlasgraph.checkpoint import load_checkpoint
from atlasgraph.cli import main
from atlasgraph.optimize import read_log

SMALL = ["--set", "frames=6", "--set", "width=40", "--set", "height=28", "--set", "nodes=2",
         "--set", "texels=32"]
TINY_FIT = ["--set", "epochs=3", "--set", "batches_per_epoch=2", "--set", "rays_per_batch=64",
            "--set", "timestamps_per_batch=2", "--set", "phase_pose_until=1",
            "--set", "phase_appearance_until=2", "--set", "plateau_start=1", "--set", 'dtype="float64"']


def run(capsys, *argv):
    code = main(["--threads", "1", *map(str, argv)])
    out = capsys.readouterr()
    return code, out.out, out.err


def pngs(path):
    return {p.name: np.asarray(Image.open(p)) for p in sorted(path.glob("*.png"))}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["--threads", "1", "synth", "--seed", "4", *SMALL, "--out", str(root / "data")]) == 0
    assert main(["--threads", "1", "fit", "--data", str(root / "data"), "--out", str(root / "run"),
                 *TINY_FIT]) == 0
    return root


def test_synth_writes_dataset(workdir):
    data = workdir / "data"
    assert len(list((data / "frames").glob("*.png"))) == 6
    assert sorted(p.name for p in (data / "masks").iterdir()) == ["node_000", "node_001"]
    assert (data / "camera.json").is_file() and (data / "ground_truth.nag").is_file()


def test_eval_of_ground_truth_is_exact(workdir, capsys):
    code, out, _ = run(capsys, "eval", "--ckpt", workdir / "data" / "ground_truth.nag",
                       "--data", workdir / "data")
    assert code == 0
    lines = out.strip().splitlines()
    assert len(lines) == 7 and lines[-1].startswith("mean psnr inf ssim 1.0000")


def test_fit_render_eval_agree_with_log(workdir, capsys):
    run_dir = workdir / "run"
    log = read_log(run_dir / "metrics.csv")
    assert [int(r["epoch"]) for r in log] == [0, 1, 2]
    logged = float(log[-1]["psnr"])
    code, out, _ = run(capsys, "eval", "--ckpt", run_dir / "model.nag", "--data", workdir / "data")
    assert code == 0
    mean = float(re.search(r"mean psnr (\S+)", out).group(1))
    assert abs(mean - logged) < 0.01
    # rendered PNGs scored independently give the same number
    code, _, _ = run(capsys, "render", "--ckpt", run_dir / "model.nag", "--out", workdir / "render")
    assert code == 0
    from atlasgraph.metrics import psnr
    ours = pngs(workdir / "render")
    gt = pngs(workdir / "data" / "frames")
    assert ours.keys() == gt.keys()
    scores = [psnr(ours[k] / 255.0, gt[k] / 255.0) for k in gt]
    assert abs(np.mean(scores) - logged) < 0.01


def test_render_frame_range(workdir, capsys):
    code, _, _ = run(capsys, "render", "--ckpt", workdir / "data" / "ground_truth.nag",
                     "--out", workdir / "r2", "--frames", "2..4")
    assert code == 0 and sorted(pngs(workdir / "r2")) == ["00002.png", "00003.png", "00004.png"]
    gt = pngs(workdir / "data" / "frames")
    assert np.array_equal(pngs(workdir / "r2")["00003.png"], gt["00003.png"])


def test_empty_edit_equals_render(workdir, capsys):
    script = workdir / "empty.json"
    script.write_text(json.dumps({"ops": []}))
    ckpt = workdir / "run" / "model.nag"
    assert run(capsys, "render", "--ckpt", ckpt, "--out", workdir / "plain")[0] == 0
    assert run(capsys, "edit", "--ckpt", ckpt, "--script", script, "--out", workdir / "edited")[0] == 0
    a, b = pngs(workdir / "plain"), pngs(workdir / "edited")
    assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def test_edit_script_and_saved_checkpoint(workdir, capsys):
    script = workdir / "ops.json"
    script.write_text(json.dumps({"ops": [{"op": "remove", "node": 0},
                                          {"op": "time_shift", "node": 1, "delta_t": 1}]}))
    code, _, _ = run(capsys, "edit", "--ckpt", workdir / "data" / "ground_truth.nag", "--script", script,
                     "--out", workdir / "ed", "--save-ckpt", workdir / "ed.nag")
    assert code == 0
    g = load_checkpoint(workdir / "ed.nag")
    assert [n.node_id for n in g.foreground] == [1]
    assert g.node(1).time_shift == pytest.approx(1 / 5)


def test_decompose_writes_straight_rgba(workdir, capsys):
    code, _, _ = run(capsys, "decompose", "--ckpt", workdir / "data" / "ground_truth.nag", "--node", 0,
                     "--out", workdir / "layer", "--frames", "0..1")
    assert code == 0
    layers = pngs(workdir / "layer")
    assert sorted(layers) == ["00000.png", "00001.png"]
    rgba = layers["00000.png"]
    assert rgba.shape[-1] == 4 and rgba[..., 3].max() == 255 and rgba[..., 3].min() == 0
    from atlasgraph.renderer import render_layer
    premult = render_layer(load_checkpoint(workdir / "data" / "ground_truth.nag"), 0, 0).numpy()
    rebuilt = rgba[..., :3] / 255.0 * (rgba[..., 3:] / 255.0)
    # straight color times alpha recovers the premultiplied layer up to 8-bit rounding
    assert np.abs(rebuilt - premult[..., :3]).max() < 2.5 / 255
    assert np.abs(rgba[..., 3] / 255.0 - premult[..., 3]).max() <= 0.5 / 255 + 1e-9


def test_gradcheck_command(workdir, capsys):
    code, out, _ = run(capsys, "gradcheck", "--ckpt", workdir / "run" / "model.nag", "--samples", 20,
                       "--perturb", 0.05)
    assert code == 0
    err = float(re.search(r"max relative error (\S+)", out).group(1))
    assert err < 1e-4


@pytest.mark.parametrize("argv", [
    ["render", "--ckpt", "missing.nag", "--out", "x"],
    ["eval", "--ckpt", "{gt}", "--data", "nowhere"],
    ["render", "--ckpt", "{gt}", "--out", "{tmp}/o", "--frames", "4..99"],
    ["decompose", "--ckpt", "{gt}", "--node", "17", "--out", "{tmp}/o"],
    ["fit", "--data", "{data}", "--out", "{tmp}/o", "--set", "bogus=1"],
    ["fit", "--data", "{data}", "--out", "{tmp}/o", "--set", "epochs"],
    ["synth", "--spec", "nope.json", "--out", "{tmp}/o"],
    ["edit", "--ckpt", "{gt}", "--script", "{tmp}/none.json", "--out", "{tmp}/o"],
])
def test_errors_are_one_line(workdir, tmp_path, capsys, argv):
    subs = {"gt": str(workdir / "data" / "ground_truth.nag"), "data": str(workdir / "data"),
            "tmp": str(tmp_path)}
    code, out, err = run(capsys, *[a.format(**subs) for a in argv])
    assert code != 0
    lines = err.strip().splitlines()
    assert len(lines) == 1 and "error" in lines[0]


def test_bad_flags_exit_nonzero(capsys):
    assert main(["render"]) != 0
    assert main(["frobnicate"]) != 0
    assert main(["--threads", "0", "render", "--ckpt", "a", "--out", "b"]) != 0


def test_console_entry_point(workdir):
    r = subprocess.run([sys.executable, "-m", "atlasgraph.cli", "--threads", "1", "eval", "--ckpt",
                        str(workdir / "data" / "missing.nag"), "--data", str(workdir / "data")],
                       capture_output=True, text=True)
    assert r.returncode == 1 and r.stderr.count("\n") == 1
    r = subprocess.run([sys.executable, "-m", "atlasgraph.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and "atlasgraph" in r.stdout
