"""Video datasets on disk: frames, per-node masks, camera and box tracks.

Layout::

    frames/00000.png              8-bit RGB
    masks/node_000/00000.png      8-bit grayscale, 0/255
    camera.json                   fx, fy, cx, cy, width, height, extrinsics (F x 4 x 4, camera-to-world)
    nodes.json                    [{id, center: F x 3, rotation: F x 4 (w, x, y, z), size: F x 3}, ...]
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import CameraIntrinsics

log = logging.getLogger(__name__)


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    frames: np.ndarray                   # F x H x W x 3, float32 in [0, 1]
    masks: np.ndarray                    # N x F x H x W, bool
    intrinsics: CameraIntrinsics
    extrinsics: np.ndarray               # F x 4 x 4
    boxes: list[dict] = field(default_factory=list)

    def __post_init__(self):
        f, h, w = self.frames.shape[:3]
        if self.masks.shape[1:] != (f, h, w) and self.masks.shape[0] != 0:
            raise DatasetError(f"mask stack {self.masks.shape} does not match frames {self.frames.shape}")
        if self.masks.shape[0] != len(self.boxes):
            raise DatasetError("one box track per mask track is required")
        if self.extrinsics.shape != (f, 4, 4):
            raise DatasetError(f"expected {f} extrinsics, got {self.extrinsics.shape}")
        if (self.intrinsics.width, self.intrinsics.height) != (w, h):
            raise DatasetError("camera image size does not match frames")
        for box in self.boxes:
            for key in ("center", "rotation", "size"):
                if len(box[key]) != f:
                    raise DatasetError(f"node {box['id']}: {key} has {len(box[key])} entries, expected {f}")

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    @property
    def node_ids(self) -> list[int]:
        return [int(b["id"]) for b in self.boxes]

    def mask_of(self, node_id: int) -> np.ndarray:
        return self.masks[self.node_ids.index(node_id)]


def quantize(img: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid, returned as float32 in [0, 1]."""
    return (np.round(np.clip(img, 0, 1) * 255.0) / 255.0).astype(np.float32)


def _write_png(path: Path, arr: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def save_dataset(ds: Dataset, path) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for k, frame in enumerate(ds.frames):
        _write_png(root / "frames" / f"{k:05d}.png", np.round(np.clip(frame, 0, 1) * 255).astype(np.uint8))
    for n in range(ds.masks.shape[0]):
        for k in range(ds.frame_count):
            _write_png(root / "masks" / f"node_{n:03d}" / f"{k:05d}.png",
                       ds.masks[n, k].astype(np.uint8) * 255)
    intr = ds.intrinsics
    camera = {"fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
              "width": intr.width, "height": intr.height,
              "extrinsics": np.asarray(ds.extrinsics, dtype=np.float64).tolist()}
    (root / "camera.json").write_text(json.dumps(camera, indent=1))
    nodes = [{"id": int(b["id"]),
              "center": np.asarray(b["center"], dtype=np.float64).tolist(),
              "rotation": np.asarray(b["rotation"], dtype=np.float64).tolist(),
              "size": np.asarray(b["size"], dtype=np.float64).tolist()} for b in ds.boxes]
    (root / "nodes.json").write_text(json.dumps(nodes, indent=1))
    return root


def _read_json(path: Path):
    if not path.is_file():
        raise DatasetError(f"missing file: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}: {e}") from None


def _read_image(path: Path, mode: str) -> np.ndarray:
    if not path.is_file():
        raise DatasetError(f"missing file: {path}")
    with Image.open(path) as im:
        return np.asarray(im.convert(mode))


def load_dataset(path) -> Dataset:
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"dataset directory not found: {root}")
    cam = _read_json(root / "camera.json")
    try:
        intr = CameraIntrinsics(float(cam["fx"]), float(cam["fy"]), float(cam["cx"]), float(cam["cy"]),
                                int(cam["width"]), int(cam["height"]))
        ext = np.asarray(cam["extrinsics"], dtype=np.float64)
    except KeyError as e:
        raise DatasetError(f"{root / 'camera.json'}: missing key {e}") from None
    nodes = _read_json(root / "nodes.json")

    frame_files = sorted((root / "frames").glob("*.png"))
    if not frame_files:
        raise DatasetError(f"no frames found in {root / 'frames'}")
    frames = []
    for p in frame_files:
        img = _read_image(p, "RGB")
        if frames and img.shape != frames[0].shape:
            raise DatasetError(f"{p}: shape {img.shape} differs from {frames[0].shape}")
        frames.append(img)
    frames = np.stack(frames).astype(np.float32) / 255.0
    f, h, w = frames.shape[:3]

    masks = np.zeros((len(nodes), f, h, w), dtype=bool)
    for n in range(len(nodes)):
        for k in range(f):
            p = root / "masks" / f"node_{n:03d}" / f"{k:05d}.png"
            m = _read_image(p, "L")
            if m.shape != (h, w):
                raise DatasetError(f"{p}: shape {m.shape} differs from frames ({h}, {w})")
            if not np.isin(m, (0, 255)).all():
                warnings.warn(f"{p}: non-binary mask thresholded at 0.5", stacklevel=2)
            masks[n, k] = m >= 128
    boxes = [{"id": int(b["id"]), "center": np.asarray(b["center"], dtype=np.float64),
              "rotation": np.asarray(b["rotation"], dtype=np.float64),
              "size": np.asarray(b["size"], dtype=np.float64)} for b in nodes]
    return Dataset(frames, masks, intr, ext, boxes)
