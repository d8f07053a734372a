"""Command-line interface: ``atlasgraph <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields as dc_fields
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .dataset import DatasetError, load_dataset, save_dataset
from .editing import EditError, EditScript, apply_script
from .metrics import format_psnr
from .optimize import TrainConfig, evaluate, fit, gradcheck_graph, mean_psnr, write_log
from .renderer import render_frame, render_layer
from .scenegraph import GraphConfig, build_graph
from .synth import SynthSpec, synth_scene

log = logging.getLogger("atlasgraph")

SYNTH_PRESETS = {"desk": SynthSpec.desk, "desk-parallax": SynthSpec.desk_parallax}
TRAIN_PRESETS = {"paper": TrainConfig, "desk": TrainConfig.desk}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ValueError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = _parse_value(value.strip())
    return out


def _read_json(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as e:
        raise ValueError(f"cannot read {path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: {e}") from None
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a JSON object")
    return data


def _dataclass_from(cls, base: dict, overrides: dict):
    known = {f.name for f in dc_fields(cls)}
    merged = {**base, **overrides}
    unknown = set(merged) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} option(s): {', '.join(sorted(unknown))}")
    return merged


def _frame_range(text: str | None, count: int) -> list[int]:
    if text is None:
        return list(range(count))
    a, sep, b = text.partition("..")
    try:
        lo = int(a) if a else 0
        hi = int(b) if sep and b else (count - 1 if sep else lo)
    except ValueError:
        raise ValueError(f"--frames expects a..b, got {text!r}") from None
    if not 0 <= lo <= hi < count:
        raise ValueError(f"frame range {text} outside [0, {count - 1}]")
    return list(range(lo, hi + 1))


def _save_png(path: Path, img: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)).save(path)


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    base = SYNTH_PRESETS[args.spec]().to_dict() if args.spec in SYNTH_PRESETS else _read_json(args.spec)
    spec = SynthSpec(**_dataclass_from(SynthSpec, base, _overrides(args.set)))
    ds, graph = synth_scene(args.seed, spec)
    out = Path(args.out)
    save_dataset(ds, out)
    save_checkpoint(graph, out / "ground_truth.nag",
                    extra={"data": str(out.resolve()), "synth": spec.to_dict(), "seed": args.seed})
    print(f"wrote {ds.frame_count} frames and {ds.masks.shape[0]} node masks to {out}")
    return 0


def _train_config(args) -> TrainConfig:
    base = TRAIN_PRESETS[args.preset]().to_dict()
    if args.config:
        base.update(_read_json(args.config))
    return TrainConfig(**_dataclass_from(TrainConfig, base, _overrides(args.set)))


def cmd_fit(args) -> int:
    config = _train_config(args)
    ds = load_dataset(args.data)
    torch.manual_seed(config.seed)
    graph = build_graph(ds, GraphConfig(eta_t=config.eta_t, eta_r=config.eta_r), dtype=config.torch_dtype)
    result = fit(graph, ds, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(graph, out / "model.nag", train_config=config.to_dict(), rng_state=result.rng_state,
                    extra={"data": str(Path(args.data).resolve())})
    write_log(result.history, out / "metrics.csv")
    final = result.final
    if final is not None and final.psnr is not None:
        print(f"final psnr {format_psnr(final.psnr)} ssim {final.ssim:.4f}")
    print(f"wrote {out / 'model.nag'} and {out / 'metrics.csv'}")
    return 0


def cmd_render(args) -> int:
    graph = load_checkpoint(args.ckpt)
    out = Path(args.out)
    for k in _frame_range(args.frames, graph.frame_count):
        _save_png(out / f"{k:05d}.png", render_frame(graph, k).double().numpy())
    return 0


def cmd_decompose(args) -> int:
    graph = load_checkpoint(args.ckpt)
    graph.node(args.node)
    out = Path(args.out)
    for k in _frame_range(args.frames, graph.frame_count):
        rgba = render_layer(graph, args.node, k).double().numpy()
        a = rgba[..., 3:]
        color = np.where(a > 0, rgba[..., :3] / np.maximum(a, 1e-12), 0.0)
        _save_png(out / f"{k:05d}.png", np.concatenate([color, a], -1))
    return 0


def cmd_edit(args) -> int:
    graph = load_checkpoint(args.ckpt)
    edited = apply_script(graph, EditScript.load(args.script))
    out = Path(args.out)
    for k in _frame_range(args.frames, edited.frame_count):
        _save_png(out / f"{k:05d}.png", render_frame(edited, k).double().numpy())
    if args.save_ckpt:
        save_checkpoint(edited, args.save_ckpt)
    return 0


def cmd_eval(args) -> int:
    graph = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    if ds.frame_count != graph.frame_count:
        raise ValueError(f"checkpoint has {graph.frame_count} frames, dataset {ds.frame_count}")
    with torch.no_grad():
        rows = evaluate(graph, ds)
    for k, (p, s) in enumerate(rows):
        print(f"frame {k:05d} psnr {format_psnr(p)} ssim {s:.4f}")
    print(f"mean psnr {format_psnr(mean_psnr(r[0] for r in rows))} ssim {np.mean([r[1] for r in rows]):.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    graph, header = load_checkpoint(args.ckpt, with_header=True)
    data = args.data or header.get("extra", {}).get("data")
    if not data:
        raise ValueError("no dataset recorded in the checkpoint; pass --data")
    ds = load_dataset(data)
    report = gradcheck_graph(graph, ds, args.samples, args.seed, args.step, perturb=args.perturb)
    print(report)
    print(f"max relative error {report.max_rel_error:.3e}")
    return 0 if report.max_rel_error < args.tolerance else 1


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="atlasgraph", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset and its ground-truth checkpoint")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--spec", default="desk", help="preset (desk, desk-parallax) or JSON file")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("fit", help="fit a scene graph to a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="JSON file of training options")
    s.add_argument("--preset", choices=sorted(TRAIN_PRESETS), default="paper")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("render", help="render frames of a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--frames", help="a..b (inclusive)")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("decompose", help="render one node as RGBA layers")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--node", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--frames")
    s.set_defaults(func=cmd_decompose)

    s = sub.add_parser("edit", help="apply an edit script and render")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--script", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--frames")
    s.add_argument("--save-ckpt")
    s.set_defaults(func=cmd_edit)

    s = sub.add_parser("eval", help="PSNR and SSIM of a checkpoint against a dataset")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="compare analytic and finite-difference gradients")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data")
    s.add_argument("--samples", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--step", type=float, default=1e-5)
    s.add_argument("--perturb", type=float, default=0.0,
                   help="std of Gaussian noise added to every parameter first")
    s.add_argument("--tolerance", type=float, default=1e-4)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = args.threads or os.cpu_count() or 1
    if threads < 1:
        print("atlasgraph: error: --threads must be positive", file=sys.stderr)
        return 2
    torch.set_num_threads(threads)
    try:
        return args.func(args)
    except (DatasetError, CheckpointError, EditError, ValueError, KeyError, OSError,
            FloatingPointError, IndexError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"atlasgraph {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
