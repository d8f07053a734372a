"""Atlas nodes, the scene graph, and graph construction from a dataset."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .fields import FieldStack, HashEncodingConfig, flow_control_points, sample_grid
from .geometry import (CameraIntrinsics, Rigid, generate_ray, intersect_plane, matrix_to_quat,
                       plane_to_world, project_points, quat_mul, quat_rotate)
from .motion import RigidTrack, face_offset, select_face


class UnobservableNodeError(ValueError):
    pass


@dataclass
class GraphConfig:
    margin: float = 0.2
    texels_per_pixel: float = 2.0
    max_texels: int = 512
    pose_control_points: int | None = None
    flow_points: int | None = None
    eta_t: float = 0.5
    eta_r: float = 0.5
    background_depth_factor: float = 1.5
    background_default_depth: float = 10.0
    background_margin: float = 0.02
    hash: HashEncodingConfig = field(default_factory=HashEncodingConfig)


class AtlasNode(nn.Module):
    """One plane: fixed base textures, neural fields, trajectory and extent."""

    def __init__(self, node_id: int, base_color: torch.Tensor, base_alpha: torch.Tensor | None,
                 extent, fields: FieldStack, track: RigidTrack | None = None,
                 fixed_pose: Rigid | None = None):
        super().__init__()
        self.node_id = int(node_id)
        self.is_background = base_alpha is None
        if self.is_background and fixed_pose is None:
            raise ValueError("background node needs a fixed pose")
        if not self.is_background and track is None:
            raise ValueError("foreground node needs a rigid track")
        extent = torch.as_tensor(extent, dtype=torch.float64)
        if (extent <= 0).any():
            raise ValueError("plane extent must be positive")
        self.register_buffer("base_color", torch.as_tensor(base_color).clone())
        if base_alpha is not None:
            self.register_buffer("base_alpha", torch.as_tensor(base_alpha).clone())
        else:
            self.base_alpha = None
        self.register_buffer("extent", extent.clone())
        self.fields = fields
        self.track = track
        if fixed_pose is not None:
            self.register_buffer("pose_rotation", fixed_pose.rotation.clone())
            self.register_buffer("pose_translation", fixed_pose.translation.clone())
        self.time_shift = 0.0
        self.edits = nn.ModuleList()

    def local_time(self, t: torch.Tensor) -> torch.Tensor:
        if self.time_shift == 0.0:
            return t
        return (t - self.time_shift).clamp(0.0, 1.0)

    def pose(self, t: torch.Tensor) -> Rigid:
        t = torch.as_tensor(t)
        if self.is_background:
            return Rigid(self.pose_rotation.expand(t.shape + (4,)),
                         self.pose_translation.expand(t.shape + (3,)))
        return self.track(self.local_time(t))

    def extra_repr(self) -> str:
        kind = "background" if self.is_background else "foreground"
        return f"id={self.node_id}, {kind}, grid={tuple(self.base_color.shape[:2])}"


class SceneGraph(nn.Module):
    def __init__(self, nodes: list[AtlasNode], camera: RigidTrack, intrinsics: CameraIntrinsics,
                 frame_count: int):
        super().__init__()
        ids = [n.node_id for n in nodes]
        if len(set(ids)) != len(ids):
            raise ValueError("node ids must be unique")
        if sum(n.is_background for n in nodes) != 1:
            raise ValueError("a scene graph needs exactly one background node")
        if frame_count < 2:
            raise ValueError("a scene graph needs at least two frames")
        self.nodes = nn.ModuleList(nodes)
        self.camera = camera
        self.intrinsics = intrinsics
        self.frame_count = frame_count
        # encoding sparsity used when rendering; fitting leaves its final value here
        self.tau = 1.0

    def ordered_nodes(self) -> list[AtlasNode]:
        return sorted(self.nodes, key=lambda n: n.node_id)

    @property
    def background(self) -> AtlasNode:
        return next(n for n in self.nodes if n.is_background)

    @property
    def foreground(self) -> list[AtlasNode]:
        return [n for n in self.ordered_nodes() if not n.is_background]

    def node(self, node_id: int) -> AtlasNode:
        for n in self.nodes:
            if n.node_id == node_id:
                return n
        raise KeyError(f"unknown node id {node_id}")

    def time_of(self, frame) -> torch.Tensor:
        return torch.as_tensor(frame, dtype=self.dtype) / (self.frame_count - 1)

    @property
    def dtype(self) -> torch.dtype:
        return self.camera.base_translation.dtype

    def camera_pose(self, t) -> Rigid:
        return self.camera(t)

    def digest(self) -> str:
        """SHA-256 over structure and every tensor, for purity checks."""
        h = hashlib.sha256()
        h.update(f"tau={self.tau!r}".encode())
        for n in self.ordered_nodes():
            h.update(f"{n.node_id}:{n.is_background}:{n.time_shift!r}:{len(n.edits)}".encode())
        for name, t in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


# --------------------------------------------------------------------------
# construction


def _pixel_grid(width: int, height: int, dtype=torch.float64) -> torch.Tensor:
    v, u = torch.meshgrid(torch.arange(height, dtype=dtype) + 0.5,
                          torch.arange(width, dtype=dtype) + 0.5, indexing="ij")
    return torch.stack([u, v], dim=-1)


def mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Pixel-edge bounding box ``(u0, v0, u1, v1)`` of a nonempty mask."""
    rows = np.nonzero(mask.any(1))[0]
    cols = np.nonzero(mask.any(0))[0]
    return int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1


def reference_frame(masks: np.ndarray) -> int:
    areas = masks.reshape(masks.shape[0], -1).sum(1)
    if areas.max() == 0:
        raise UnobservableNodeError("node mask is empty in every frame")
    return int(np.argmax(areas))


def estimate_extent(masks: np.ndarray, track: RigidTrack, intrinsics: CameraIntrinsics,
                    camera: RigidTrack, margin: float = 0.2) -> torch.Tensor:
    """Plane size from the largest mask's bounding rectangle, plus a relative margin."""
    masks = np.asarray(masks, dtype=bool)
    ref = reference_frame(masks)
    f = masks.shape[0]
    t = torch.tensor(ref / (f - 1) if f > 1 else 0.0, dtype=torch.float64)
    u0, v0, u1, v1 = mask_bbox(masks[ref])
    corners = torch.tensor([[u0, v0], [u1, v0], [u0, v1], [u1, v1]], dtype=torch.float64)
    with torch.no_grad():
        cam = camera(t)
        ray = generate_ray(intrinsics, Rigid(cam.rotation.double(), cam.translation.double()), corners)
        pose = track(t)
        pose = Rigid(pose.rotation.double(), pose.translation.double())
        _, pts, valid = intersect_plane(ray.origin, ray.direction, pose)
    if not valid.all():
        raise UnobservableNodeError("mask corner rays miss the node plane")
    local = pose.inverse_apply(pts)[:, :2]
    size = local.max(0).values - local.min(0).values
    return size * (1.0 + margin)


def _grid_shape(extent: torch.Tensor, pose: Rigid, intrinsics: CameraIntrinsics, cam: Rigid,
                texels_per_pixel: float, max_texels: int) -> tuple[int, int]:
    """Texel counts giving roughly ``texels_per_pixel`` texels per image pixel."""
    x = torch.tensor([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]], dtype=torch.float64)
    pts = plane_to_world(x, pose, extent)
    uv, z = project_points(intrinsics, cam, pts)
    if (z <= 0).any():
        return 64, 64
    wpx = max((uv[1] - uv[0]).norm().item(), (uv[3] - uv[2]).norm().item())
    hpx = max((uv[2] - uv[0]).norm().item(), (uv[3] - uv[1]).norm().item())
    w = int(np.clip(math.ceil(wpx * texels_per_pixel), 2, max_texels))
    h = int(np.clip(math.ceil(hpx * texels_per_pixel), 2, max_texels))
    return h, w


def _bilinear_image(img: torch.Tensor, uv: torch.Tensor) -> torch.Tensor:
    """Sample an ``H x W [x C]`` image at pixel coordinates (pixel centers at +0.5)."""
    h, w = img.shape[0], img.shape[1]
    x = torch.stack([uv[..., 0] / w, uv[..., 1] / h], dim=-1)
    return sample_grid(img, x)


def project_reference(image: torch.Tensor, mask: torch.Tensor | None, extent: torch.Tensor,
                      pose: Rigid, intrinsics: CameraIntrinsics, cam: Rigid, shape: tuple[int, int],
                      observed_threshold: float | None = None):
    """Fill an atlas grid by casting texel centers into a reference image.

    Returns ``(color, alpha, observed)``; texels whose center does not land
    inside the image are unobserved and get gray with zero alpha.
    """
    h, w = shape
    xs = torch.stack(torch.meshgrid((torch.arange(w, dtype=torch.float64) + 0.5) / w,
                                    (torch.arange(h, dtype=torch.float64) + 0.5) / h,
                                    indexing="xy"), dim=-1)
    pts = plane_to_world(xs, pose, extent)
    uv, z = project_points(intrinsics, cam, pts)
    inside = (z > 0) & (uv[..., 0] >= 0) & (uv[..., 0] <= intrinsics.width) \
        & (uv[..., 1] >= 0) & (uv[..., 1] <= intrinsics.height)
    color = _bilinear_image(image, uv)
    if mask is not None:
        alpha = _bilinear_image(mask, uv)
    else:
        alpha = torch.ones(shape, dtype=torch.float64)
    observed = inside
    if observed_threshold is not None:
        observed = observed & (alpha <= observed_threshold)
    color = torch.where(observed[..., None], color, torch.full_like(color, 0.5))
    alpha = torch.where(observed, alpha, torch.zeros_like(alpha))
    return color, alpha, observed


def camera_track_from(extrinsics: np.ndarray, control_points: int | None = None,
                      eta_t: float = 0.5, eta_r: float = 0.5) -> RigidTrack:
    ext = torch.as_tensor(np.asarray(extrinsics), dtype=torch.float64)
    return RigidTrack(ext[:, :3, 3].clone(), matrix_to_quat(ext[:, :3, :3]), control_points,
                      eta_t, eta_r)


def init_node(node_id: int, frames: np.ndarray, masks: np.ndarray, box, intrinsics: CameraIntrinsics,
              camera: RigidTrack, config: GraphConfig = GraphConfig()) -> AtlasNode:
    """Initialize a foreground node from its box track and the largest-mask frame."""
    masks = np.asarray(masks, dtype=bool)
    ref = reference_frame(masks)
    f = masks.shape[0]
    centers = torch.as_tensor(np.asarray(box["center"]), dtype=torch.float64)
    rots = torch.as_tensor(np.asarray(box["rotation"]), dtype=torch.float64)
    rots = rots / rots.norm(dim=-1, keepdim=True)
    times = torch.arange(f, dtype=torch.float64) / (f - 1)
    with torch.no_grad():
        cams = camera(times)
    view = centers - cams.translation
    view = view / view.norm(dim=-1, keepdim=True)
    face = select_face(rots, view)
    base_rot = quat_mul(rots, face_offset(face).expand_as(rots))
    track = RigidTrack(centers, base_rot, config.pose_control_points, config.eta_t, config.eta_r)
    extent = estimate_extent(masks, track, intrinsics, camera, config.margin)

    t_ref = times[ref]
    with torch.no_grad():
        pose = track(t_ref)
        cam = camera(t_ref)
    shape = _grid_shape(extent, pose, intrinsics, cam, config.texels_per_pixel, config.max_texels)
    image = torch.as_tensor(np.asarray(frames[ref]), dtype=torch.float64)
    mask = torch.as_tensor(masks[ref], dtype=torch.float64)
    color, alpha, _ = project_reference(image, mask, extent, pose, intrinsics, cam, shape)
    fields = FieldStack(config.flow_points or flow_control_points(f), config.hash)
    return AtlasNode(node_id, color, alpha, extent, fields, track=track)


def _frame_basis(z: torch.Tensor, x_hint: torch.Tensor) -> torch.Tensor:
    z = z / z.norm()
    x = x_hint - (x_hint @ z) * z
    if x.norm() < 1e-9:
        x = torch.tensor([1.0, 0.0, 0.0], dtype=z.dtype)
        x = x - (x @ z) * z
    x = x / x.norm()
    y = torch.linalg.cross(z, x)
    return torch.stack([x, y, z], dim=1)


def place_background(intrinsics: CameraIntrinsics, camera: RigidTrack, boxes: list[dict],
                     frame_count: int, config: GraphConfig = GraphConfig()) -> tuple[Rigid, torch.Tensor]:
    """Pose and extent of the background plane behind every box."""
    times = torch.arange(frame_count, dtype=torch.float64) / max(frame_count - 1, 1)
    with torch.no_grad():
        cams = camera(times)
    ez = torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64)
    ex = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
    view = quat_rotate(cams.rotation, ez.expand(frame_count, 3)).mean(0)
    view = view / view.norm()
    right = quat_rotate(cams.rotation, ex.expand(frame_count, 3)).mean(0)
    center = cams.translation.mean(0)
    far = 0.0
    for box in boxes:
        c = torch.as_tensor(np.asarray(box["center"]), dtype=torch.float64)
        s = torch.as_tensor(np.asarray(box["size"]), dtype=torch.float64)
        d = (c - center) @ view + 0.5 * s.norm(dim=-1)
        far = max(far, d.max().item())
    depth = config.background_depth_factor * far if far > 0 else config.background_default_depth
    rot = matrix_to_quat(_frame_basis(view, right))
    pose = Rigid(rot, center + depth * view)
    w, h = intrinsics.width, intrinsics.height
    corners = torch.tensor([[0, 0], [w, 0], [0, h], [w, h]], dtype=torch.float64)
    half = torch.zeros(2, dtype=torch.float64)
    for k in range(frame_count):
        ray = generate_ray(intrinsics, cams.index(k), corners)
        _, pts, valid = intersect_plane(ray.origin, ray.direction, pose)
        if not valid.all():
            raise ValueError("background plane is not visible from every frame")
        local = pose.inverse_apply(pts)[:, :2].abs().max(0).values
        half = torch.maximum(half, local)
    return pose, 2 * half * (1 + config.background_margin)


def init_background(node_id: int, frames: np.ndarray, masks: np.ndarray, boxes: list[dict],
                    intrinsics: CameraIntrinsics, camera: RigidTrack,
                    config: GraphConfig = GraphConfig()) -> AtlasNode:
    f = frames.shape[0]
    pose, extent = place_background(intrinsics, camera, boxes, f, config)
    union = masks.any(0) if masks.shape[0] else np.zeros(frames.shape[:3], dtype=bool)
    areas = union.reshape(f, -1).sum(1)
    ref = int(np.argmin(areas))
    t_ref = torch.tensor(ref / (f - 1), dtype=torch.float64)
    with torch.no_grad():
        cam = camera(t_ref)
    shape = _grid_shape(extent, pose, intrinsics, cam, config.texels_per_pixel, config.max_texels)
    image = torch.as_tensor(np.asarray(frames[ref]), dtype=torch.float64)
    fg = torch.as_tensor(union[ref], dtype=torch.float64)
    color, _, _ = project_reference(image, fg, extent, pose, intrinsics, cam, shape,
                                    observed_threshold=0.0)
    fields = FieldStack(config.flow_points or flow_control_points(f), config.hash, with_alpha=False)
    return AtlasNode(node_id, color, None, extent, fields, fixed_pose=pose)


def build_graph(dataset, config: GraphConfig = GraphConfig(), dtype=torch.float32) -> SceneGraph:
    """One node per mask track plus a background node; camera track from extrinsics."""
    if dataset.frames.shape[0] == 0:
        raise ValueError("dataset has no frames")
    if dataset.extrinsics is None or dataset.intrinsics is None:
        raise ValueError("dataset has no camera")
    f = dataset.frames.shape[0]
    camera = camera_track_from(dataset.extrinsics, config.pose_control_points, config.eta_t, config.eta_r)
    nodes = []
    for k, box in enumerate(dataset.boxes):
        nodes.append(init_node(box["id"], dataset.frames, dataset.masks[k], box,
                               dataset.intrinsics, camera, config))
    bg_id = max([n.node_id for n in nodes], default=-1) + 1
    nodes.append(init_background(bg_id, dataset.frames, dataset.masks, dataset.boxes,
                                 dataset.intrinsics, camera, config))
    graph = SceneGraph(nodes, camera, dataset.intrinsics, f)
    return graph.to(dtype)
