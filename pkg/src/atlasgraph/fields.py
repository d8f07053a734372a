"""Texture grids, hash-encoded neural fields and the per-node appearance model."""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch
from torch import nn

from . import autodiff as ad
from .motion import hermite_weights

# logit clamp for the base opacity grid
EPS_ALPHA = 1e-4

LAMBDA_COLOR = 0.1
LAMBDA_ALPHA = 0.1
LAMBDA_VIEW = 0.1
LAMBDA_FLOW = 0.1

_PRIMES = (1, 2654435761, 805459861, 3674653429)


@dataclass(frozen=True)
class HashEncodingConfig:
    levels: int = 16
    features_per_level: int = 4
    per_level_scale: float = 1.61
    log2_hashmap_size: int = 17
    base_resolution: int = 4
    interpolation: str = "linear"

    @property
    def output_dim(self) -> int:
        return self.levels * self.features_per_level

    def to_dict(self) -> dict:
        return asdict(self)


def sample_grid(grid: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Bilinear lookup in an ``H x W [x C]`` texel grid at ``x`` in [0, 1]^2.

    Texel ``(i, j)`` is centered at ``((j + 0.5) / W, (i + 0.5) / H)``;
    coordinates outside the grid clamp to the edge texels.
    """
    squeeze = grid.dim() == 2
    if squeeze:
        grid = grid[..., None]
    h, w = grid.shape[0], grid.shape[1]
    px = ad.clamp(x[..., 0] * w - 0.5, 0, w - 1)
    py = ad.clamp(x[..., 1] * h - 0.5, 0, h - 1)
    x0 = ad.floor(px).clamp(max=max(w - 2, 0))
    y0 = ad.floor(py).clamp(max=max(h - 2, 0))
    fx = (px - x0)[..., None]
    fy = (py - y0)[..., None]
    x0, y0 = x0.long(), y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    v00, v01 = grid[y0, x0], grid[y0, x1]
    v10, v11 = grid[y1, x0], grid[y1, x1]
    out = (v00 * (1 - fx) + v01 * fx) * (1 - fy) + (v10 * (1 - fx) + v11 * fx) * fy
    return out[..., 0] if squeeze else out


class HashEncoding(nn.Module):
    """Multiresolution hash encoding with all levels in one table.

    Level ``l`` has ``ceil(base * scale**l - 1) + 1`` cells per axis. A level
    is indexed densely when its grid fits the table, otherwise through the
    XOR-of-primes spatial hash; both wrap modulo the level's table size.
    """

    def __init__(self, input_dim: int, config: HashEncodingConfig = HashEncodingConfig(),
                 init_scale: float = 1e-4, dtype=torch.float32):
        super().__init__()
        self.input_dim = input_dim
        self.config = config
        cap = 2 ** config.log2_hashmap_size
        scales, res, sizes, dense = [], [], [], []
        for level in range(config.levels):
            s = config.base_resolution * config.per_level_scale ** level - 1.0
            r = math.ceil(s) + 1
            n = min(r ** input_dim, cap)
            n = (n + 7) // 8 * 8
            scales.append(s)
            res.append(r)
            sizes.append(n)
            dense.append(r ** input_dim <= cap)
        offsets = [0]
        for n in sizes[:-1]:
            offsets.append(offsets[-1] + n)
        self.level_scales = scales
        self.level_resolution = res
        self.level_sizes = sizes
        self.level_dense = dense
        self.register_buffer("_scale", torch.tensor(scales, dtype=torch.float64), persistent=False)
        self.register_buffer("_res", torch.tensor(res, dtype=torch.int64), persistent=False)
        self.register_buffer("_size", torch.tensor(sizes, dtype=torch.int64), persistent=False)
        self.register_buffer("_offset", torch.tensor(offsets, dtype=torch.int64), persistent=False)
        self.register_buffer("_dense", torch.tensor(dense), persistent=False)
        self.register_buffer("_stride", torch.tensor(
            [[r ** k for k in range(input_dim)] for r in res], dtype=torch.int64), persistent=False)
        table = torch.empty(sum(sizes), config.features_per_level, dtype=dtype)
        nn.init.uniform_(table, -init_scale, init_scale)
        self.table = nn.Parameter(table)

    @property
    def output_dim(self) -> int:
        return self.config.output_dim

    @staticmethod
    def _corner_product(per_axis: torch.Tensor, op) -> torch.Tensor:
        """Combine ``(..., d, 2)`` per-axis values into ``(..., 2**d)`` corner values.

        Corner ``c`` takes the upper neighbor along axis ``k`` when bit ``k`` of
        ``c`` is set.
        """
        d = per_axis.shape[-2]
        out = per_axis[..., d - 1, :]
        for k in range(d - 2, -1, -1):
            out = op(out[..., :, None], per_axis[..., k, None, :]).flatten(-2)
        return out

    def corner_indices(self, cell: torch.Tensor, levels: int | None = None) -> torch.Tensor:
        """Table rows of the 2**d corners of integer cells ``(..., L, d)`` for the first L levels."""
        levels = cell.shape[-2] if levels is None else levels
        # resolution grows with level, so dense levels come first
        nd = sum(self.level_dense[:levels])
        nb = torch.stack([cell, cell + 1], dim=-1)                     # ..., L, d, 2
        parts = []
        if nd:
            parts.append(self._corner_product(nb[..., :nd, :, :] * self._stride[:nd, :, None], torch.add))
        if nd < levels:
            primes = torch.tensor(_PRIMES[:self.input_dim], dtype=torch.int64)
            parts.append(self._corner_product((nb[..., nd:, :, :] * primes[:, None]) & 0xFFFFFFFF,
                                              torch.bitwise_xor))
        idx = torch.cat(parts, dim=-2)
        return idx % self._size[:levels, None] + self._offset[:levels, None]

    def forward(self, x: torch.Tensor, levels: int | None = None) -> torch.Tensor:
        """Encode ``x``; only the first ``levels`` levels are computed, the rest are zero."""
        lead = x.shape[:-1]
        x = x.reshape(-1, self.input_dim)
        total = self.config.levels
        levels = total if levels is None else max(0, min(levels, total))
        if levels == 0:
            return x.new_zeros(lead + (self.output_dim,))
        scale = self._scale[:levels].to(x.dtype)
        pos = x[:, None, :] * scale[None, :, None] + 0.5           # N, L, d
        cell = ad.floor(pos)
        frac = pos - cell
        w = self._corner_product(torch.stack([1 - frac, frac], dim=-1), torch.mul)   # N, L, C
        idx = self.corner_indices(cell.long(), levels)
        # index_select scatters its gradient with index_add_, much cheaper than
        # the sort-based accumulation behind advanced indexing
        feats = self.table.index_select(0, idx.reshape(-1)).reshape(idx.shape + (-1,))  # N, L, C, F
        out = (w.unsqueeze(-1) * feats).sum(-2)
        if levels < total:
            out = torch.cat([out, out.new_zeros(out.shape[0], total - levels, out.shape[-1])], dim=1)
        return out.reshape(lead + (self.output_dim,))


def hash_encode(encoding: HashEncoding, x: torch.Tensor) -> torch.Tensor:
    return encoding(x)


def active_features(tau: float, total: int, features_per_level: int) -> int:
    return min(total, max(math.ceil(tau * total - 1e-12), features_per_level))


def apply_sparsity(features: torch.Tensor, tau: float, features_per_level: int = 4) -> torch.Tensor:
    """Zero all but the first ``ceil(tau * E)`` (coarsest) encoding entries."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    e = features.shape[-1]
    keep = active_features(tau, e, features_per_level)
    if keep >= e:
        return features
    mask = torch.zeros(e, dtype=features.dtype)
    mask[:keep] = 1
    return features * mask


class Mlp(nn.Module):
    """ReLU MLP: ``hidden_layers`` layers of width ``width`` and a linear head."""

    def __init__(self, in_dim: int, out_dim: int, width: int = 64, hidden_layers: int = 5,
                 zero_head: bool = True):
        super().__init__()
        dims = [in_dim] + [width] * hidden_layers
        self.hidden = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.head = nn.Linear(width, out_dim)
        if zero_head:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        for layer in self.hidden:
            h = ad.relu(layer(h))
        return self.head(h)


class NeuralField(nn.Module):
    def __init__(self, input_dim: int, out_dim: int, config: HashEncodingConfig,
                 masked: bool = False):
        super().__init__()
        self.encoding = HashEncoding(input_dim, config)
        self.mlp = Mlp(self.encoding.output_dim, out_dim)
        self.masked = masked

    def forward(self, x: torch.Tensor, tau: float = 1.0) -> torch.Tensor:
        if not self.masked:
            return self.mlp(self.encoding(x))
        f = self.encoding.config.features_per_level
        keep = active_features(tau, self.encoding.output_dim, f)
        h = apply_sparsity(self.encoding(x, -(-keep // f)), tau, f)
        return self.mlp(h)


def flow_control_points(frames: int) -> int:
    return max(4, math.ceil(frames / 4))


class FieldStack(nn.Module):
    """Color, opacity, flow and view-dependent fields of one node."""

    def __init__(self, flow_points: int, config: HashEncodingConfig = HashEncodingConfig(),
                 with_alpha: bool = True):
        super().__init__()
        self.config = config
        self.flow_points = flow_points
        self.color = NeuralField(2, 3, config)
        self.alpha = NeuralField(2, 1, config) if with_alpha else None
        self.flow = NeuralField(2, flow_points * 2, config, masked=True)
        self.view = NeuralField(4, 4, config, masked=True)

    def named_fields(self):
        out = [("color_field", self.color)]
        if self.alpha is not None:
            out.append(("alpha_field", self.alpha))
        out += [("flow_field", self.flow), ("view_field", self.view)]
        return out


def query_flow(fields: FieldStack, x: torch.Tensor, t: torch.Tensor, tau: float = 1.0) -> torch.Tensor:
    """Spline flow ``lambda_f * S(t, F_f(x))`` for points ``x`` (N x 2), times ``t`` (N)."""
    cp = fields.flow(x, tau).reshape(x.shape[:-1] + (fields.flow_points, 2))
    w = hermite_weights(torch.as_tensor(t, dtype=x.dtype).expand(x.shape[:-1]), fields.flow_points)
    return LAMBDA_FLOW * (w[..., None] * cp).sum(-2)


def logit(a: torch.Tensor) -> torch.Tensor:
    a = ad.clamp(a, EPS_ALPHA, 1 - EPS_ALPHA)
    return torch.log(a) - torch.log1p(-a)


def query_node(node, x: torch.Tensor, phi: torch.Tensor, t: torch.Tensor, tau: float = 1.0,
               use_flow: bool = True, use_view: bool = True):
    """Color and opacity of ``node`` at plane points ``x`` with view angles ``phi``.

    Returns ``(color, opacity, x_warped)``; background nodes have opacity 1.
    """
    f = node.fields
    xw = x + query_flow(f, x, t, tau) if use_flow else x
    color = sample_grid(node.base_color, xw) + LAMBDA_COLOR * f.color(xw)
    alpha_logit = None
    if not node.is_background:
        alpha_logit = logit(sample_grid(node.base_alpha, xw))
        alpha_logit = alpha_logit + LAMBDA_ALPHA * f.alpha(xw)[..., 0]
    if use_view:
        v = f.view(torch.cat([xw, phi], dim=-1), tau)
        color = color + LAMBDA_VIEW * v[..., :3]
        if alpha_logit is not None:
            alpha_logit = alpha_logit + LAMBDA_VIEW * v[..., 3]
    color = ad.clamp(color, 0.0, 1.0)
    if alpha_logit is None:
        opacity = torch.ones_like(color[..., 0])
    else:
        opacity = torch.sigmoid(alpha_logit)
    return color, opacity, xw
