"""Depth-ordered ray casting and alpha compositing through a scene graph."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from . import autodiff as ad
from .fields import query_node
from .geometry import Ray, Rigid, generate_ray, intersect_plane, plane_coords, view_angle
from .scenegraph import SceneGraph, _pixel_grid


@dataclass
class RenderOptions:
    use_flow: bool = True
    use_view: bool = True


@dataclass
class RayBatch:
    """Composite colors plus the per-node samples behind them.

    Per-node arrays have one column per node in ``node_ids`` order (ascending
    id), not in depth order.
    """
    color: torch.Tensor          # R x 3
    transmittance: torch.Tensor  # R
    node_ids: list[int]
    opacity: torch.Tensor        # R x K, zero on misses
    node_color: torch.Tensor     # R x K x 3
    depth: torch.Tensor          # R x K, inf on misses
    hit: torch.Tensor            # R x K
    weight: torch.Tensor         # R x K compositing weights


@dataclass
class NodeSample:
    node_id: int
    color: torch.Tensor
    opacity: float
    depth: float


@dataclass
class RaySample:
    color: torch.Tensor
    samples: list[NodeSample]
    transmittance: float


def composite(colors: torch.Tensor, opacity: torch.Tensor, depth: torch.Tensor):
    """Front-to-back compositing of K samples per ray.

    Samples are ordered by detached depth with a stable sort, so equal depths
    keep column order. Returns ``(color, weights, transmittance)`` with the
    weights in the input column order.
    """
    order = ad.branch(torch.sort(depth.detach(), dim=-1, stable=True).indices)
    a = torch.gather(opacity, -1, order)
    c = torch.gather(colors, -2, order[..., None].expand_as(colors))
    keep = 1 - a
    trans = torch.cumprod(torch.cat([torch.ones_like(keep[..., :1]), keep], dim=-1), dim=-1)
    w_sorted = a * trans[..., :-1]
    color = (w_sorted[..., None] * c).sum(-2)
    weights = torch.zeros_like(w_sorted).scatter(-1, order, w_sorted)
    return color, weights, trans[..., -1]


def _apply_edits(node, color: torch.Tensor, xw: torch.Tensor) -> torch.Tensor:
    for edit in node.edits:
        color = edit.blend(color, xw)
    return color


def shade_rays(graph: SceneGraph, origins: torch.Tensor, directions: torch.Tensor,
               times: torch.Tensor, time_index: torch.Tensor, tau: float | None = None,
               nodes: list | None = None, options: RenderOptions = RenderOptions()) -> RayBatch:
    """Shade R rays; ray r is evaluated at ``times[time_index[r]]``.

    ``tau`` defaults to the graph's own sparsity setting.
    """
    tau = graph.tau if tau is None else tau
    nodes = graph.ordered_nodes() if nodes is None else sorted(nodes, key=lambda n: n.node_id)
    r = origins.shape[0]
    dtype = origins.dtype
    k = len(nodes)
    opacity = torch.zeros(r, k, dtype=dtype)
    colors = torch.zeros(r, k, 3, dtype=dtype)
    depth = torch.full((r, k), torch.inf, dtype=dtype)
    hit = torch.zeros(r, k, dtype=torch.bool)
    ray_t = times[time_index]
    cols_o, cols_c, cols_d = [], [], []
    for j, node in enumerate(nodes):
        poses = node.pose(times)
        pose = Rigid(poses.rotation[time_index], poses.translation[time_index])
        l, pts, valid = intersect_plane(origins, directions, pose)
        x, inside = plane_coords(pts, pose, node.extent)
        h = ad.branch(valid & inside)
        idx = torch.nonzero(h).reshape(-1)
        o_full = torch.zeros(r, dtype=dtype)
        c_full = torch.zeros(r, 3, dtype=dtype)
        if idx.numel():
            sub = Rigid(pose.rotation[idx], pose.translation[idx])
            phi = view_angle(directions[idx], sub)
            t_local = node.local_time(ray_t[idx])
            c, a, xw = query_node(node, x[idx], phi, t_local, tau,
                                  use_flow=options.use_flow, use_view=options.use_view)
            c = _apply_edits(node, c, xw)
            o_full = o_full.index_put((idx,), a)
            c_full = c_full.index_put((idx,), c)
        cols_o.append(o_full)
        cols_c.append(c_full)
        cols_d.append(torch.where(h, l, torch.full_like(l, torch.inf)).detach())
        hit[:, j] = h
    if k:
        opacity = torch.stack(cols_o, dim=1)
        colors = torch.stack(cols_c, dim=1)
        depth = torch.stack(cols_d, dim=1)
        color, weights, trans = composite(colors, opacity, depth)
    else:
        color = torch.zeros(r, 3, dtype=dtype)
        weights = opacity
        trans = torch.ones(r, dtype=dtype)
    return RayBatch(color, trans, [n.node_id for n in nodes], opacity, colors, depth, hit, weights)


def shade_ray(graph: SceneGraph, ray: Ray, t: float, tau: float | None = None,
              options: RenderOptions = RenderOptions()) -> RaySample:
    dtype = graph.dtype
    times = torch.tensor([t], dtype=dtype)
    batch = shade_rays(graph, ray.origin.reshape(1, 3).to(dtype), ray.direction.reshape(1, 3).to(dtype),
                       times, torch.zeros(1, dtype=torch.long), tau, options=options)
    order = torch.sort(batch.depth[0], stable=True).indices
    samples = [NodeSample(batch.node_ids[j], batch.node_color[0, j], batch.opacity[0, j].item(),
                          batch.depth[0, j].item()) for j in order.tolist() if batch.hit[0, j]]
    return RaySample(batch.color[0], samples, batch.transmittance[0].item())


def frame_rays(graph: SceneGraph, frame: int, pixels: torch.Tensor | None = None):
    """Rays of one frame at ``pixels`` (default: every pixel center, row-major)."""
    intr = graph.intrinsics
    if pixels is None:
        pixels = _pixel_grid(intr.width, intr.height, graph.dtype).reshape(-1, 2)
    t = graph.time_of(frame)
    cam = graph.camera_pose(t)
    ray = generate_ray(intr, cam, pixels.to(graph.dtype))
    return ray.origin.expand_as(ray.direction), ray.direction, t


def _render(graph: SceneGraph, frame: int, tau: float, nodes, options, chunk: int):
    if not 0 <= frame < graph.frame_count:
        raise IndexError(f"frame {frame} outside [0, {graph.frame_count})")
    intr = graph.intrinsics
    with torch.no_grad():
        origins, dirs, t = frame_rays(graph, frame)
        times = t.reshape(1)
        out_c, out_a = [], []
        for s in range(0, dirs.shape[0], chunk):
            o, d = origins[s:s + chunk], dirs[s:s + chunk]
            b = shade_rays(graph, o, d, times, torch.zeros(d.shape[0], dtype=torch.long), tau,
                           nodes=nodes, options=options)
            out_c.append(b.color)
            out_a.append(1 - b.transmittance)
    color = torch.cat(out_c).reshape(intr.height, intr.width, 3)
    alpha = torch.cat(out_a).reshape(intr.height, intr.width)
    return color, alpha


def render_frame(graph: SceneGraph, frame: int, tau: float | None = None,
                 options: RenderOptions = RenderOptions(), chunk: int = 16384) -> torch.Tensor:
    """Full image (H x W x 3) of one input frame."""
    return _render(graph, frame, tau, None, options, chunk)[0]


def render_layer(graph: SceneGraph, node_id: int, frame: int, tau: float | None = None,
                 options: RenderOptions = RenderOptions(), chunk: int = 16384) -> torch.Tensor:
    """Premultiplied RGBA (H x W x 4) of a single node, without occluders."""
    node = graph.node(node_id)
    color, alpha = _render(graph, frame, tau, [node], options, chunk)
    return torch.cat([color, alpha[..., None]], dim=-1)


def render_video(graph: SceneGraph, tau: float | None = None, options: RenderOptions = RenderOptions(),
                 frames=None) -> torch.Tensor:
    frames = range(graph.frame_count) if frames is None else frames
    return torch.stack([render_frame(graph, f, tau, options) for f in frames])
