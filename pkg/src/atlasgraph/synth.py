"""Synthetic scenes with known ground truth.

A scene is a set of textured, soft-edged planes moving in front of a
background plane. Frames are rendered with this package's renderer from a
ground-truth :class:`SceneGraph`, so fitted graphs can be compared against
exact layers, poses and masks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
import torch

from .dataset import Dataset, quantize
from .fields import FieldStack, HashEncodingConfig, flow_control_points
from .geometry import (CameraIntrinsics, Rigid, axis_angle_quat, matrix_to_quat, project_points, quat_mul,
                       quat_to_matrix)
from .motion import RigidTrack
from .renderer import render_frame, shade_rays, frame_rays
from .scenegraph import AtlasNode, SceneGraph

# fields of a ground-truth graph are either exactly zero or low-frequency
GT_HASH = HashEncodingConfig(levels=2, features_per_level=2, per_level_scale=2.0,
                             log2_hashmap_size=8, base_resolution=2)


@dataclass
class SynthSpec:
    frames: int = 16
    width: int = 96
    height: int = 64
    nodes: int = 3
    motion: float = 0.25            # world units, peak displacement from the mean position
    uniform_motion: bool = False    # constant velocity instead of a smooth oscillation
    rotation: float = 3.0           # degrees of pose wobble
    camera_shake: float = 0.0       # world units / radians-per-unit of per-frame camera jitter
    parallax: float = 0.0           # >0 injects planar flow with this peak displacement (atlas units)
    view_dependence: float = 0.0    # >0 injects view-dependent color offsets of this amplitude
    focal: float | None = None      # default 0.9 * width
    texels: int = 96
    edge_softness: float = 0.15
    texture_frequency: float = 1.5  # cycles across a plane

    @classmethod
    def desk(cls, **kw) -> "SynthSpec":
        return cls(**kw)

    @classmethod
    def desk_parallax(cls, **kw) -> "SynthSpec":
        base = dict(parallax=0.03, view_dependence=0.08, rotation=10.0)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


def smooth_texture(rng: np.random.Generator, h: int, w: int, frequency: float,
                   waves: int = 3) -> np.ndarray:
    """Band-limited RGB texture in [0.1, 0.9] built from a few plane waves."""
    v, u = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    out = np.empty((h, w, 3))
    base = rng.uniform(0.3, 0.7, size=3)
    for c in range(3):
        acc = np.zeros((h, w))
        for _ in range(waves):
            ang = rng.uniform(0, 2 * np.pi)
            f = frequency * rng.uniform(0.5, 1.0)
            acc += np.sin(2 * np.pi * f * (np.cos(ang) * u + np.sin(ang) * v) + rng.uniform(0, 2 * np.pi))
        out[..., c] = base[c] + 0.2 * acc / waves
    return np.clip(out, 0.1, 0.9)


def soft_shape(h: int, w: int, power: float, inner: float, softness: float) -> np.ndarray:
    """Superellipse opacity: 1 inside radius ``inner``, smoothstep to 0 over ``softness``."""
    v, u = np.meshgrid((np.arange(h) + 0.5) / h * 2 - 1, (np.arange(w) + 0.5) / w * 2 - 1, indexing="ij")
    r = (np.abs(u) ** power + np.abs(v) ** power) ** (1.0 / power)
    s = np.clip((inner + softness - r) / softness, 0.0, 1.0)
    return s * s * (3 - 2 * s)


def _trajectory(rng, spec: SynthSpec, c0: np.ndarray, times: np.ndarray) -> np.ndarray:
    ang = rng.uniform(0, 2 * np.pi)
    direction = np.array([np.cos(ang), 0.6 * np.sin(ang), rng.uniform(-0.2, 0.2)])
    direction /= np.linalg.norm(direction)
    if spec.uniform_motion:
        return c0 + spec.motion * direction * (2 * times[:, None] - 1)
    omega = rng.uniform(0.5, 1.0)
    phase = rng.uniform(0, 2 * np.pi)
    return c0 + spec.motion * direction * np.sin(2 * np.pi * omega * times + phase)[:, None]


def _rotations(rng, spec: SynthSpec, times: np.ndarray) -> torch.Tensor:
    yaw = math.radians(rng.uniform(8, 18)) * rng.choice([-1, 1])
    pitch = math.radians(rng.uniform(-6, 6))
    wob = math.radians(spec.rotation)
    ph = rng.uniform(0, 2 * np.pi, size=2)
    out = []
    for t in times:
        qy = axis_angle_quat([0.0, 1.0, 0.0], yaw + wob * math.sin(2 * math.pi * t + ph[0]))
        qx = axis_angle_quat([1.0, 0.0, 0.0], pitch + 0.5 * wob * math.sin(2 * math.pi * t + ph[1]))
        out.append(quat_mul(qy, qx))
    return torch.stack(out)


def _camera(rng, spec: SynthSpec) -> np.ndarray:
    ext = np.tile(np.eye(4), (spec.frames, 1, 1))
    if spec.camera_shake > 0:
        for k in range(spec.frames):
            rv = rng.normal(scale=0.02 * spec.camera_shake, size=3)
            q = axis_angle_quat(rv / (np.linalg.norm(rv) + 1e-12), float(np.linalg.norm(rv)))
            ext[k, :3, :3] = quat_to_matrix(q).numpy()
            ext[k, :3, 3] = rng.normal(scale=spec.camera_shake, size=3)
    return ext


def _image_boxes(intr, cam_track, track: RigidTrack, extent, reach: float, frames: int):
    """Per-frame pixel bounding boxes of the opaque part of a plane."""
    times = torch.arange(frames, dtype=torch.float64) / (frames - 1)
    corners = torch.tensor([[-1, -1], [1, -1], [-1, 1], [1, 1]], dtype=torch.float64) * reach * 0.5
    local = torch.cat([corners * extent, torch.zeros(4, 1, dtype=torch.float64)], 1)
    boxes = []
    with torch.no_grad():
        for k in range(frames):
            pose = track(times[k])
            cam = cam_track(times[k])
            uv, z = project_points(intr, cam, pose.apply(local))
            if (z <= 0).any():
                return None
            boxes.append((uv[:, 0].min().item(), uv[:, 1].min().item(),
                          uv[:, 0].max().item(), uv[:, 1].max().item()))
    return np.array(boxes)


def _overlap(a: np.ndarray, b: np.ndarray, pad: float) -> bool:
    return bool(((a[:, 0] < b[:, 2] + pad) & (b[:, 0] < a[:, 2] + pad)
                 & (a[:, 1] < b[:, 3] + pad) & (b[:, 1] < a[:, 3] + pad)).any())


def _inject_field(field, rng: np.random.Generator, amplitude: float, dims: int, samples: torch.Tensor):
    """Give a ground-truth field zero-mean, low-frequency output of RMS ``amplitude``.

    Only the first ``dims`` outputs are driven; the rest stay zero.
    """
    gen = torch.Generator().manual_seed(int(rng.integers(2 ** 31)))
    with torch.no_grad():
        field.encoding.table.uniform_(-1.0, 1.0, generator=gen)
        for layer in field.mlp.hidden:
            layer.weight.normal_(0.0, math.sqrt(2.0 / layer.in_features), generator=gen)
            layer.bias.zero_()
        hid = samples
        hid = field.encoding(hid)
        for layer in field.mlp.hidden:
            hid = torch.relu(layer(hid))
        head = field.mlp.head
        head.weight.zero_()
        head.bias.zero_()
        w = torch.randn(dims, head.in_features, generator=gen, dtype=head.weight.dtype)
        out = hid @ w.T
        mean = out.mean(0)
        rms = (out - mean).pow(2).mean().sqrt().clamp_min(1e-12)
        head.weight[:dims] = w * (amplitude / rms)
        head.bias[:dims] = -mean * (amplitude / rms)


def synth_scene(seed: int, spec: SynthSpec = SynthSpec(), max_tries: int = 2000):
    """Build a ground-truth graph and render its dataset.

    Returns ``(dataset, graph)``; the graph is in 64-bit precision. Frames are
    quantized to 8 bits; masks are the pixels where a node's compositing
    weight exceeds 0.5.
    """
    # field initializers draw from torch's global RNG; pin it so the graph is a function of the seed
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return _synth_scene(seed, spec, max_tries)


def _synth_scene(seed: int, spec: SynthSpec, max_tries: int):
    rng = np.random.default_rng(seed)
    f, w, h = spec.frames, spec.width, spec.height
    focal = spec.focal or 0.9 * w
    intr = CameraIntrinsics(focal, focal, w / 2, h / 2, w, h)
    ext = _camera(rng, spec)
    cam_track = RigidTrack(torch.as_tensor(ext[:, :3, 3]),
                           torch.stack([_quat_from(ext[k, :3, :3]) for k in range(f)]))
    times = np.arange(f) / (f - 1)
    flow_pts = flow_control_points(f)
    inject = spec.parallax > 0 or spec.view_dependence > 0
    inner = 1.0 - spec.edge_softness - 0.05

    nodes, boxes, placed = [], [], []
    for node_id in range(spec.nodes):
        for _ in range(max_tries):
            depth = rng.uniform(4.0, 6.0)
            size = np.array([rng.uniform(1.1, 1.5), rng.uniform(0.85, 1.15)])
            half_w = 0.5 * depth * w / focal
            half_h = 0.5 * depth * h / focal
            c0 = np.array([rng.uniform(-half_w, half_w), rng.uniform(-half_h, half_h), depth])
            centers = _trajectory(rng, spec, c0, times)
            rots = _rotations(rng, spec, times)
            track = RigidTrack(torch.as_tensor(centers), rots)
            extent = torch.as_tensor(size, dtype=torch.float64)
            bb = _image_boxes(intr, cam_track, track, extent, 1.0, f)
            if bb is None or bb[:, 0].min() < 2 or bb[:, 1].min() < 2 \
                    or bb[:, 2].max() > w - 2 or bb[:, 3].max() > h - 2:
                continue
            if any(_overlap(bb, other, 2.0) for other in placed):
                continue
            break
        else:
            raise RuntimeError(f"could not place {spec.nodes} non-overlapping nodes in {w}x{h}")
        placed.append(bb)
        n = spec.texels
        th = max(8, int(round(n * size[1] / size[0])))
        color = smooth_texture(rng, th, n, spec.texture_frequency)
        alpha = soft_shape(th, n, rng.uniform(2.5, 5.0), inner, spec.edge_softness)
        fields = FieldStack(flow_pts, GT_HASH).double()
        fields.requires_grad_(False)
        nodes.append(AtlasNode(node_id, torch.as_tensor(color), torch.as_tensor(alpha), extent,
                               fields, track=track))
        boxes.append({"id": node_id, "center": centers, "rotation": rots.numpy(),
                      "size": np.tile([size[0], size[1], 0.2 * size[0]], (f, 1))})

    # background: fronto-parallel, covering the view of every frame with room to spare
    bg_depth = 12.0
    bg_extent = torch.tensor([bg_depth * w / focal, bg_depth * h / focal], dtype=torch.float64) \
        * (1.3 + 4 * spec.camera_shake)
    bg_color = smooth_texture(rng, 2 * h, 2 * w, 2.0 * spec.texture_frequency)
    bg_fields = FieldStack(flow_pts, GT_HASH, with_alpha=False).double()
    bg_fields.requires_grad_(False)
    bg = AtlasNode(spec.nodes, torch.as_tensor(bg_color), None, bg_extent, bg_fields,
                   fixed_pose=Rigid(torch.tensor([1.0, 0, 0, 0], dtype=torch.float64),
                                    torch.tensor([0.0, 0, bg_depth], dtype=torch.float64)))
    graph = SceneGraph(nodes + [bg], cam_track, intr, f)
    graph.requires_grad_(False)

    if inject:
        gen_x = torch.as_tensor(rng.uniform(0, 1, size=(2048, 2)))
        gen_phi = torch.as_tensor(np.stack([rng.uniform(0.0, 0.25, 2048), rng.uniform(0, 1, 2048)], 1))
        for node in nodes:
            if spec.parallax > 0:
                _inject_field(node.fields.flow, rng, spec.parallax / 0.1, 2 * flow_pts, gen_x)
            if spec.view_dependence > 0:
                _inject_field(node.fields.view, rng, spec.view_dependence / 0.1, 3,
                              torch.cat([gen_x, gen_phi], 1))

    frames = np.stack([render_frame(graph, k).numpy() for k in range(f)])
    frames = quantize(frames)
    masks = node_masks(graph)
    return Dataset(frames, masks, intr, ext, boxes), graph


def _quat_from(m: np.ndarray) -> torch.Tensor:
    return matrix_to_quat(torch.as_tensor(m, dtype=torch.float64))


def node_masks(graph: SceneGraph) -> np.ndarray:
    """Per-node masks (N x F x H x W): compositing weight > 0.5 at each pixel center."""
    fg = graph.foreground
    intr = graph.intrinsics
    out = np.zeros((len(fg), graph.frame_count, intr.height, intr.width), dtype=bool)
    with torch.no_grad():
        for k in range(graph.frame_count):
            o, d, t = frame_rays(graph, k)
            b = shade_rays(graph, o, d, t.reshape(1), torch.zeros(d.shape[0], dtype=torch.long))
            for j, node in enumerate(fg):
                col = b.node_ids.index(node.node_id)
                out[j, k] = (b.weight[:, col] > 0.5).reshape(intr.height, intr.width).numpy()
    return out
