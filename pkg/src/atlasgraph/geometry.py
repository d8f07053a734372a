"""Pinhole rays, quaternions, ray/plane intersection and plane coordinates.

Conventions: quaternions are ``(w, x, y, z)``; camera frames look down +z
with x right and y down; a plane's local z axis is its normal and its local
x/y axes span the plane. All functions broadcast over leading dimensions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from . import autodiff as ad

EPS_PARALLEL = 1e-8
EPS_NEAR = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal length must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point outside the image")

    @classmethod
    def from_focal(cls, focal: float, width: int, height: int,
                   principal_point: tuple[float, float] | None = None) -> "CameraIntrinsics":
        cx, cy = principal_point if principal_point is not None else (width / 2, height / 2)
        return cls(focal, focal, cx, cy, width, height)

    @property
    def image_size(self) -> tuple[int, int]:
        return self.width, self.height

    def matrix(self) -> torch.Tensor:
        return torch.tensor([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]],
                            dtype=torch.float64)


@dataclass
class Rigid:
    """Rotation (unit quaternion) followed by translation; maps local to world."""
    rotation: torch.Tensor
    translation: torch.Tensor

    @property
    def normal(self) -> torch.Tensor:
        ez = torch.zeros_like(self.translation)
        ez[..., 2] = 1.0
        return quat_rotate(self.rotation, ez)

    def apply(self, points: torch.Tensor) -> torch.Tensor:
        return quat_rotate(self.rotation, points) + self.translation

    def inverse_apply(self, points: torch.Tensor) -> torch.Tensor:
        return quat_rotate(quat_conj(self.rotation), points - self.translation)

    def index(self, idx) -> "Rigid":
        return Rigid(self.rotation[idx], self.translation[idx])

    def matrix(self) -> torch.Tensor:
        m = torch.zeros(self.translation.shape[:-1] + (4, 4), dtype=self.translation.dtype)
        m[..., :3, :3] = quat_to_matrix(self.rotation)
        m[..., :3, 3] = self.translation
        m[..., 3, 3] = 1.0
        return m

    @classmethod
    def identity(cls, dtype=torch.float64) -> "Rigid":
        return cls(torch.tensor([1.0, 0, 0, 0], dtype=dtype), torch.zeros(3, dtype=dtype))

    @classmethod
    def from_matrix(cls, m: torch.Tensor) -> "Rigid":
        return cls(matrix_to_quat(m[..., :3, :3]), m[..., :3, 3].clone())


PlanePose = Rigid


@dataclass
class Ray:
    origin: torch.Tensor
    direction: torch.Tensor


# --------------------------------------------------------------------------
# quaternions


def quat_mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], dim=-1)


def quat_conj(q: torch.Tensor) -> torch.Tensor:
    return q * q.new_tensor([1.0, -1.0, -1.0, -1.0])


def quat_normalize(q: torch.Tensor) -> torch.Tensor:
    return q / q.norm(dim=-1, keepdim=True)


def quat_rotate(q: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    shape = torch.broadcast_shapes(q.shape[:-1], v.shape[:-1])
    q = q.expand(shape + (4,))
    v = v.expand(shape + (3,))
    w = q[..., :1]
    u = q[..., 1:]
    t = 2.0 * torch.linalg.cross(u, v, dim=-1)
    return v + w * t + torch.linalg.cross(u, t, dim=-1)


def quat_to_matrix(q: torch.Tensor) -> torch.Tensor:
    w, x, y, z = q.unbind(-1)
    return torch.stack([
        torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], dim=-2)


def matrix_to_quat(m: torch.Tensor) -> torch.Tensor:
    """Rotation matrix to unit quaternion with non-negative w (Shepperd's method)."""
    m = torch.as_tensor(m)
    flat = m.reshape(-1, 3, 3)
    out = []
    for r in flat:
        tr = r[0, 0] + r[1, 1] + r[2, 2]
        if tr > 0:
            s = torch.sqrt(tr + 1.0) * 2
            q = torch.stack([0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s,
                             (r[1, 0] - r[0, 1]) / s])
        elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
            s = torch.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
            q = torch.stack([(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s,
                             (r[0, 2] + r[2, 0]) / s])
        elif r[1, 1] > r[2, 2]:
            s = torch.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
            q = torch.stack([(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s,
                             (r[1, 2] + r[2, 1]) / s])
        else:
            s = torch.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
            q = torch.stack([(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s,
                             (r[1, 2] + r[2, 1]) / s, 0.25 * s])
        if q[0] < 0:
            q = -q
        out.append(quat_normalize(q))
    return torch.stack(out).reshape(m.shape[:-2] + (4,))


def quat_slerp(q0: torch.Tensor, q1: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    """Spherical interpolation; returns ``q0`` bit-exactly where ``s == 0``."""
    s = s[..., None]
    dot = (q0 * q1).sum(-1, keepdim=True)
    q1 = torch.where(dot < 0, -q1, q1)
    dot = dot.abs().clamp(max=1.0)
    near = dot > 0.9995
    omega = torch.acos(torch.where(near, torch.zeros_like(dot), dot))
    sin_o = torch.sin(omega)
    safe = torch.where(near, torch.ones_like(sin_o), sin_o)
    a = torch.where(near, 1 - s, torch.sin((1 - s) * omega) / safe)
    b = torch.where(near, s, torch.sin(s * omega) / safe)
    q = quat_normalize(a * q0 + b * q1)
    return torch.where(s == 0, q0, q)


def axis_angle_quat(axis, angle: float, dtype=torch.float64) -> torch.Tensor:
    axis = torch.as_tensor(axis, dtype=dtype)
    axis = axis / axis.norm()
    return torch.cat([torch.tensor([math.cos(angle / 2)], dtype=dtype), axis * math.sin(angle / 2)])


# --------------------------------------------------------------------------
# rays and planes


def generate_ray(intrinsics: CameraIntrinsics, extrinsics: Rigid, pixel: torch.Tensor) -> Ray:
    """Ray through ``pixel`` (u, v in pixel units) of a camera-to-world pose."""
    pixel = torch.as_tensor(pixel, dtype=extrinsics.translation.dtype)
    x = (pixel[..., 0] - intrinsics.cx) / intrinsics.fx
    y = (pixel[..., 1] - intrinsics.cy) / intrinsics.fy
    d_cam = torch.stack([x, y, torch.ones_like(x)], dim=-1)
    direction = quat_rotate(extrinsics.rotation, d_cam)
    origin = extrinsics.translation.expand_as(direction)
    return Ray(origin, direction)


def project_points(intrinsics: CameraIntrinsics, extrinsics: Rigid, points: torch.Tensor):
    """World points to pixel coordinates; returns ``(uv, depth)``."""
    local = extrinsics.inverse_apply(points)
    z = local[..., 2]
    u = intrinsics.fx * local[..., 0] / z + intrinsics.cx
    v = intrinsics.fy * local[..., 1] / z + intrinsics.cy
    return torch.stack([u, v], dim=-1), z


def intersect_plane(origin: torch.Tensor, direction: torch.Tensor, pose: Rigid,
                    eps_parallel: float = EPS_PARALLEL, eps_near: float = EPS_NEAR):
    """Ray/plane intersection.

    Returns ``(depth, point, valid)``; ``valid`` is false for (near-)parallel
    rays and for hits at or behind the origin.
    """
    n = pose.normal
    p = pose.translation
    denom = (direction * n).sum(-1)
    scale = direction.norm(dim=-1) * n.norm(dim=-1)
    parallel = denom.abs() <= eps_parallel * scale
    safe = torch.where(parallel, torch.ones_like(denom), denom)
    depth = ((p - origin) * n).sum(-1) / safe
    valid = ~parallel & (depth > eps_near)
    depth = torch.where(valid, depth, torch.full_like(depth, math.inf))
    point = origin + torch.where(valid, depth, torch.zeros_like(depth))[..., None] * direction
    return depth, point, valid


def plane_coords(world_point: torch.Tensor, pose: Rigid, extent: torch.Tensor):
    """World point to normalized plane coordinates; returns ``(x, inside)``."""
    local = pose.inverse_apply(world_point)
    x = local[..., :2] / extent + 0.5
    inside = ((x >= 0) & (x <= 1)).all(-1)
    return x, inside


def plane_to_world(x: torch.Tensor, pose: Rigid, extent: torch.Tensor) -> torch.Tensor:
    xy = (x - 0.5) * extent
    local = torch.cat([xy, torch.zeros_like(xy[..., :1])], dim=-1)
    return pose.apply(local)


def view_angle(direction: torch.Tensor, pose: Rigid) -> torch.Tensor:
    """Normalized spherical angle of a direction in the plane frame.

    ``(inclination / pi, azimuth / 2pi + 0.5)``, inclination measured from
    the plane normal, azimuth in [-pi, pi) from the local x axis.
    """
    local = quat_rotate(quat_conj(pose.rotation), direction)
    local = local / local.norm(dim=-1, keepdim=True)
    lx, ly, lz = local.unbind(-1)
    # guarded sqrt: exact on the pole and a finite backward pass there
    rho2 = lx * lx + ly * ly
    pole = rho2 == 0
    rho = torch.where(pole, torch.zeros_like(rho2), torch.sqrt(torch.where(pole, torch.ones_like(rho2), rho2)))
    theta = torch.atan2(rho, lz)
    psi = torch.atan2(ly, lx)
    ad.branch((lx < 0) & (ly < 0))  # side of the azimuth seam
    psi = torch.where(psi >= math.pi, psi - 2 * math.pi, psi)
    return torch.stack([theta / math.pi, psi / (2 * math.pi) + 0.5], dim=-1)


def hit_mask(valid: torch.Tensor, inside: torch.Tensor) -> torch.Tensor:
    return ad.branch(valid & inside)
