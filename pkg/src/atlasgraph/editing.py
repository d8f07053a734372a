"""Texture edits in atlas space and graph surgery (remove, duplicate, move, retime)."""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import nn

from .fields import query_flow, query_node, sample_grid
from .geometry import plane_to_world, project_points
from .scenegraph import SceneGraph, _bilinear_image

log = logging.getLogger(__name__)

OPS = ("remove", "duplicate", "translate", "time_shift", "texture")


class EditError(ValueError):
    pass


class EditTexture(nn.Module):
    """User texture stored on a node's atlas grid: color ``H x W x 3``, alpha ``H x W``."""

    def __init__(self, color: torch.Tensor, alpha: torch.Tensor):
        super().__init__()
        if color.shape[:2] != alpha.shape:
            raise EditError("edit color and alpha grids must be co-registered")
        self.register_buffer("color", color.clone())
        self.register_buffer("alpha", alpha.clone())

    def blend(self, color: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        """Matte the texture over ``color`` at canonical atlas points ``x``."""
        a = sample_grid(self.alpha.to(color.dtype), x)[..., None]
        c = sample_grid(self.color.to(color.dtype), x)
        return blend_color(color, c, a)


def blend_color(color: torch.Tensor, edit_color: torch.Tensor, edit_alpha: torch.Tensor) -> torch.Tensor:
    return (1 - edit_alpha) * color + edit_alpha * edit_color


def blended_node_color(node, x: torch.Tensor, phi: torch.Tensor, t: torch.Tensor, tau: float = 1.0):
    """Node color at plane points ``x`` with every attached edit applied."""
    color, _, xw = query_node(node, x, phi, t, tau)
    for edit in node.edits:
        color = edit.blend(color, xw)
    return color


def invert_flow(node, x_target: torch.Tensor, t, tau: float = 1.0, max_iter: int = 20,
                tol: float = 1e-5):
    """Solve ``x + flow(x, t) = x_target`` by fixed-point iteration.

    Returns ``(x, converged)``; ``x`` is the best iterate per point.
    """
    x_target = torch.as_tensor(x_target)
    single = x_target.dim() == 1
    xt = x_target.reshape(-1, 2)
    t = torch.as_tensor(t, dtype=xt.dtype).expand(xt.shape[0])
    with torch.no_grad():
        x = xt.clone()
        best = x.clone()
        best_res = torch.full((xt.shape[0],), torch.inf, dtype=xt.dtype)
        for _ in range(max_iter):
            f = query_flow(node.fields, x, t, tau)
            res = (x + f - xt).norm(dim=-1)
            better = res < best_res
            best = torch.where(better[:, None], x, best)
            best_res = torch.where(better, res, best_res)
            if (best_res < tol).all():
                break
            x = xt - f
        else:
            f = query_flow(node.fields, x, t, tau)
            res = (x + f - xt).norm(dim=-1)
            better = res < best_res
            best = torch.where(better[:, None], x, best)
            best_res = torch.where(better, res, best_res)
    converged = best_res < tol
    if single:
        return best[0], bool(converged[0])
    return best.reshape(x_target.shape), converged.reshape(x_target.shape[:-1])


def project_texture(graph: SceneGraph, node_id: int, texture, reference_frame: int,
                    tau: float | None = None, use_flow: bool = True) -> EditTexture:
    """Carry an RGBA image drawn over ``reference_frame`` into the node's atlas.

    Each atlas texel is traced back through the node's flow to its plane
    point at the reference time, projected into the reference camera, and the
    texture is sampled there. Texels that project outside the image, or
    whose flow inversion does not converge, stay transparent.
    """
    node = graph.node(node_id)
    tau = graph.tau if tau is None else tau
    dtype = node.base_color.dtype
    tex = torch.as_tensor(np.asarray(texture), dtype=dtype)
    intr = graph.intrinsics
    if tex.shape != (intr.height, intr.width, 4):
        raise EditError(f"texture must be {intr.height}x{intr.width} RGBA, got {tuple(tex.shape)}")
    h, w = node.base_color.shape[:2]
    xs = torch.stack(torch.meshgrid((torch.arange(w, dtype=dtype) + 0.5) / w,
                                    (torch.arange(h, dtype=dtype) + 0.5) / h, indexing="xy"), dim=-1)
    t = graph.time_of(reference_frame).to(dtype)
    ok = torch.ones(h, w, dtype=torch.bool)
    with torch.no_grad():
        x = xs
        if use_flow:
            x, ok = invert_flow(node, xs.reshape(-1, 2), node.local_time(t), tau)
            x, ok = x.reshape(h, w, 2), ok.reshape(h, w)
        pts = plane_to_world(x, node.pose(t), node.extent.to(dtype))
        uv, z = project_points(intr, graph.camera_pose(t), pts)
    inside = ok & (z > 0) & (uv[..., 0] >= 0) & (uv[..., 0] <= intr.width) \
        & (uv[..., 1] >= 0) & (uv[..., 1] <= intr.height)
    rgba = _bilinear_image(tex, uv)
    skipped = int((~ok).sum())
    if skipped:
        log.warning("flow inversion did not converge for %d texels of node %d", skipped, node_id)
    alpha = torch.where(inside, rgba[..., 3], torch.zeros_like(rgba[..., 3]))
    if not inside.any():
        log.warning("node %d is not visible in frame %d; edit is empty", node_id, reference_frame)
    return EditTexture(rgba[..., :3], alpha)


# --------------------------------------------------------------------------
# edit scripts


@dataclass
class EditOp:
    op: str
    node: int
    delta_translation: list[float] | None = None
    delta_t: float = 0.0
    image: str | None = None
    reference_frame: int | None = None

    def __post_init__(self):
        if self.op not in OPS:
            raise EditError(f"unknown edit operation {self.op!r}; expected one of {', '.join(OPS)}")
        if self.op == "texture" and (self.image is None or self.reference_frame is None):
            raise EditError("texture edits need 'image' and 'reference_frame'")
        if self.delta_translation is not None and len(self.delta_translation) != 3:
            raise EditError("delta_translation must have three components")


@dataclass
class EditScript:
    ops: list[EditOp] = field(default_factory=list)
    base_dir: Path | None = None

    @classmethod
    def from_dict(cls, d, base_dir=None) -> "EditScript":
        items = d["ops"] if isinstance(d, dict) else d
        try:
            return cls([EditOp(**item) for item in items], base_dir)
        except TypeError as e:
            raise EditError(f"malformed edit operation: {e}") from None

    @classmethod
    def load(cls, path) -> "EditScript":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise EditError(f"{path}: {e}") from None
        return cls.from_dict(data, path.parent)

    def to_dict(self) -> dict:
        return {"ops": [{k: v for k, v in asdict(op).items() if v is not None} for op in self.ops]}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


def load_texture(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGBA"), dtype=np.float64) / 255.0


def _shift_translation(node, delta) -> None:
    d = torch.as_tensor(delta, dtype=node.extent.dtype)
    with torch.no_grad():
        if node.is_background:
            node.pose_translation += d.to(node.pose_translation.dtype)
        else:
            node.track.base_translation += d.to(node.track.base_translation.dtype)


def apply_script(graph: SceneGraph, script: EditScript) -> SceneGraph:
    """Apply ``script`` to a copy of ``graph``; the input graph is not modified."""
    out = copy.deepcopy(graph)
    frames = graph.frame_count
    for op in script.ops:
        node = out.node(op.node)
        if op.op == "remove":
            if node.is_background:
                raise EditError("the background node cannot be removed")
            out.nodes = nn.ModuleList([n for n in out.nodes if n.node_id != op.node])
        elif op.op == "duplicate":
            if node.is_background:
                raise EditError("the background node cannot be duplicated")
            dup = copy.deepcopy(node)
            dup.node_id = max(n.node_id for n in out.nodes) + 1
            if op.delta_translation is not None:
                _shift_translation(dup, op.delta_translation)
            dup.time_shift = node.time_shift + op.delta_t / (frames - 1)
            out.nodes.append(dup)
        elif op.op == "translate":
            _shift_translation(node, op.delta_translation or [0.0, 0.0, 0.0])
        elif op.op == "time_shift":
            node.time_shift = node.time_shift + op.delta_t / (frames - 1)
        elif op.op == "texture":
            image = Path(op.image)
            if script.base_dir is not None and not image.is_absolute():
                image = script.base_dir / image
            tex = load_texture(image)
            node.edits.append(project_texture(out, op.node, tex, op.reference_frame))
    return out
