"""Cubic Hermite splines and the rigid pose models for nodes and the camera."""
from __future__ import annotations

import math

import torch
from torch import nn

from . import autodiff as ad
from .geometry import Rigid, quat_mul, quat_rotate, quat_slerp, quat_normalize, axis_angle_quat

# knot snapping tolerance (in knot units) so evaluation at k/(P-1) is exact
_SNAP = 1e-9


def _knot_position(t: torch.Tensor, n: int):
    """Segment index and local parameter for ``n`` uniformly spaced knots on [0, 1]."""
    t = t.clamp(0.0, 1.0)
    u = t * (n - 1)
    r = torch.round(u)
    u = torch.where((u - r).abs() < _SNAP * n, r, u)
    k = ad.floor(u).clamp(0, n - 2)
    return k.long(), u - k


def hermite_weights(t: torch.Tensor, n: int) -> torch.Tensor:
    """Linear weights ``w`` with ``S(t) = w @ points`` for ``n`` control points.

    Catmull-Rom tangents at interior knots, one-sided differences at the ends.
    Shape ``t.shape + (n,)``.
    """
    if n < 2:
        raise ValueError("a Hermite track needs at least two control points")
    t = torch.as_tensor(t)
    k, s = _knot_position(t, n)
    s2, s3 = s * s, s * s * s
    h00 = 2 * s3 - 3 * s2 + 1
    h10 = s3 - 2 * s2 + s
    h01 = -2 * s3 + 3 * s2
    h11 = s3 - s2

    w = torch.zeros(t.shape + (n,), dtype=s.dtype)

    def add(idx, val):
        w.scatter_add_(-1, idx[..., None], val[..., None])

    add(k, h00)
    add(k + 1, h01)
    # tangent at k
    first = k == 0
    add(torch.where(first, k + 1, k + 1), torch.where(first, h10, h10 / 2))
    add(torch.where(first, k, k - 1).clamp(min=0), torch.where(first, -h10, -h10 / 2))
    # tangent at k + 1
    last = k + 1 == n - 1
    add(torch.where(last, k + 1, (k + 2).clamp(max=n - 1)), torch.where(last, h11, h11 / 2))
    add(torch.where(last, k, k), torch.where(last, -h11, -h11 / 2))
    return w


def hermite_eval(points: torch.Tensor, t) -> torch.Tensor:
    """Evaluate the spline through ``points`` (P x k) at ``t`` (clamped to [0, 1])."""
    t = torch.as_tensor(t, dtype=points.dtype)
    return hermite_weights(t, points.shape[0]) @ points


def rotvec_to_quat(v: torch.Tensor) -> torch.Tensor:
    """Axis-angle exponential map; smooth (and exact) at the identity."""
    theta2 = (v * v).sum(-1, keepdim=True)
    small = theta2 < 1e-8
    theta = torch.sqrt(torch.where(small, torch.ones_like(theta2), theta2))
    k = torch.where(small, 0.5 - theta2 / 48.0, torch.sin(theta / 2) / theta)
    w = torch.where(small, 1.0 - theta2 / 8.0, torch.cos(theta / 2))
    return torch.cat([w, k * v], dim=-1)


class RigidTrack(nn.Module):
    """Per-frame base pose plus spline offsets in translation and rotation.

    Used for foreground nodes and for the camera (camera-to-world).
    """

    def __init__(self, base_translation: torch.Tensor, base_rotation: torch.Tensor,
                 control_points: int | None = None, eta_t: float = 0.5, eta_r: float = 0.5):
        super().__init__()
        base_translation = torch.as_tensor(base_translation)
        base_rotation = quat_normalize(torch.as_tensor(base_rotation, dtype=base_translation.dtype))
        frames = base_translation.shape[0]
        if frames < 1:
            raise ValueError("a track needs at least one frame")
        p = control_points or max(frames, 2)
        self.register_buffer("base_translation", base_translation.clone())
        self.register_buffer("base_rotation", base_rotation.clone())
        self.offset_translation = nn.Parameter(torch.zeros(p, 3, dtype=base_translation.dtype))
        self.offset_rotation = nn.Parameter(torch.zeros(p, 3, dtype=base_translation.dtype))
        self.eta_t = eta_t
        self.eta_r = eta_r

    @property
    def frames(self) -> int:
        return self.base_translation.shape[0]

    @property
    def control_points(self) -> int:
        return self.offset_translation.shape[0]

    def base_pose(self, t: torch.Tensor) -> Rigid:
        t = torch.as_tensor(t, dtype=self.base_translation.dtype)
        f = self.frames
        if f == 1:
            shape = t.shape
            return Rigid(self.base_rotation[0].expand(shape + (4,)),
                         self.base_translation[0].expand(shape + (3,)))
        k, s = _knot_position(t, f)
        tr0, tr1 = self.base_translation[k], self.base_translation[k + 1]
        trans = torch.where(s[..., None] == 0, tr0, (1 - s[..., None]) * tr0 + s[..., None] * tr1)
        rot = quat_slerp(self.base_rotation[k], self.base_rotation[k + 1], s)
        return Rigid(rot, trans)

    def forward(self, t: torch.Tensor) -> Rigid:
        t = torch.as_tensor(t, dtype=self.base_translation.dtype)
        base = self.base_pose(t)
        w = hermite_weights(t, self.control_points)
        dt = w @ self.offset_translation
        dr = w @ self.offset_rotation
        trans = base.translation + self.eta_t * dt
        rot = quat_mul(base.rotation, rotvec_to_quat(self.eta_r * dr))
        return Rigid(rot, trans)


CameraTrack = RigidTrack


def node_pose(track: RigidTrack, t) -> Rigid:
    return track(t)


def camera_pose(track: RigidTrack, t) -> Rigid:
    return track(t)


# --------------------------------------------------------------------------
# plane orientation from bounding boxes

FACE_OFFSETS = {
    "front": (0.0,),
    "side": (math.pi / 2,),
    "diagonal": (math.pi / 4,),
}


def face_offset(name: str, dtype=torch.float64) -> torch.Tensor:
    """Rotation (about the box's y axis) that puts the plane on the named face."""
    return axis_angle_quat([0.0, 1.0, 0.0], FACE_OFFSETS[name][0], dtype=dtype)


def select_face(box_rotations: torch.Tensor, view_dirs: torch.Tensor) -> str:
    """Pick the box face whose normal is most aligned with the viewing rays.

    ``view_dirs`` are per-frame unit vectors from the camera to the box.
    Ties go to the front face.
    """
    best, best_score = "front", -1.0
    ez = torch.tensor([0.0, 0.0, 1.0], dtype=box_rotations.dtype)
    for name in ("front", "side", "diagonal"):
        q = quat_mul(box_rotations, face_offset(name, box_rotations.dtype).expand_as(box_rotations))
        n = quat_rotate(q, ez.expand(box_rotations.shape[:-1] + (3,)))
        score = (n * view_dirs).sum(-1).abs().mean().item()
        if score > best_score + 1e-12:
            best, best_score = name, score
    return best
