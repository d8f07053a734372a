"""Loss, batch sampling, phase-gated Adam and the fitting loop."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, asdict, field, fields as dc_fields
from typing import Callable

import numpy as np
import torch

from . import autodiff as ad
from .autodiff import GradCheckReport, ParameterRegistry, grad_check
from .dataset import Dataset, quantize
from .geometry import generate_ray
from .metrics import psnr, ssim
from .renderer import RenderOptions, render_frame, shade_rays
from .scenegraph import SceneGraph

log = logging.getLogger(__name__)

POSE_KINDS = ("camera_offsets", "node_offsets")
APPEARANCE_KINDS = ("color_field", "alpha_field")
DETAIL_KINDS = ("flow_field", "view_field")


@dataclass
class TrainConfig:
    epochs: int = 80
    batches_per_epoch: int = 140
    rays_per_batch: int = 100_000
    timestamps_per_batch: int = 20
    beta: float = 0.005
    lr: float = 1e-3
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    plateau_threshold: float = 1e-4
    plateau_start: int = 20
    phase_pose_until: int = 5
    phase_appearance_until: int = 20
    eta_t: float = 0.5
    eta_r: float = 0.5
    seed: int = 0
    dtype: str = "float32"
    use_flow: bool = True
    use_view: bool = True
    use_mask_loss: bool = True

    def __post_init__(self):
        for name in ("batches_per_epoch", "rays_per_batch", "timestamps_per_batch", "lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0 or self.beta < 0:
            raise ValueError("epochs and beta must be non-negative")
        if not 0 <= self.phase_pose_until <= self.phase_appearance_until:
            raise ValueError("phase boundaries must be ordered")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau factor must lie in (0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        """Small-scale schedule for CPU runs: 80 epochs of 20 batches of 2048 x 4 rays."""
        base = dict(epochs=80, batches_per_epoch=20, rays_per_batch=2048, timestamps_per_batch=4)
        base.update(kw)
        return cls(**base)

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dc_fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {', '.join(sorted(unknown))}")
        return cls(**d)


# --------------------------------------------------------------------------
# schedules


def phase_gate(epoch: int, config: TrainConfig = TrainConfig()) -> set[str]:
    """Parameter kinds trained during ``epoch``."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    kinds = set(POSE_KINDS)
    if epoch >= config.phase_pose_until:
        kinds |= set(APPEARANCE_KINDS)
    if epoch >= config.phase_appearance_until:
        kinds |= set(DETAIL_KINDS)
    return kinds


def tau_schedule(epoch: int, max_epoch: int) -> float:
    """Fraction of encoding entries left active; grows from 0.05 to 1 and stays there.

    The sine argument is held at pi/2 once reached, so fine levels are never
    switched back off late in training.
    """
    if max_epoch <= 0:
        return 1.0
    tau = 0.05 + math.sin(min(epoch * math.pi / (1.6 * max_epoch), math.pi / 2))
    return min(max(tau, 0.05), 1.0)


# --------------------------------------------------------------------------
# batches and loss


@dataclass
class Batch:
    pixels: torch.Tensor        # R x 2, pixel centers
    frames: torch.Tensor        # T distinct frame indices
    time_index: torch.Tensor    # R, index into frames
    colors: torch.Tensor        # R x 3
    masks: torch.Tensor         # R x N, one column per dataset node
    node_ids: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return self.pixels.shape[0]


def sample_batch(dataset: Dataset, n_spatial: int, n_time: int, rng: np.random.Generator,
                 dtype=torch.float32) -> Batch:
    """The same ``n_spatial`` random pixels in each of ``n_time`` distinct random frames."""
    f, h, w = dataset.frames.shape[:3]
    if n_spatial < 1 or n_time < 1:
        raise ValueError("batch dimensions must be positive")
    if n_time > f:
        raise ValueError(f"cannot draw {n_time} distinct frames from {f}")
    frames = rng.choice(f, size=n_time, replace=False)
    flat = rng.integers(0, h * w, size=n_spatial)
    rows, cols = flat // w, flat % w
    fr = np.repeat(frames, n_spatial)
    rr = np.tile(rows, n_time)
    cc = np.tile(cols, n_time)
    pixels = np.stack([cc + 0.5, rr + 0.5], axis=1)
    colors = dataset.frames[fr, rr, cc]
    masks = dataset.masks[:, fr, rr, cc].T if dataset.masks.shape[0] else np.zeros((len(fr), 0))
    return Batch(torch.as_tensor(pixels, dtype=dtype), torch.as_tensor(frames),
                 torch.arange(n_time).repeat_interleave(n_spatial),
                 torch.as_tensor(colors, dtype=dtype), torch.as_tensor(masks, dtype=dtype),
                 dataset.node_ids)


def atlas_loss(pred: torch.Tensor, gt: torch.Tensor, opacity: torch.Tensor | None = None,
               hit: torch.Tensor | None = None, masks: torch.Tensor | None = None,
               beta: float = 0.005) -> torch.Tensor:
    """Mean L1 color error plus ``beta`` times the mean |opacity - mask| over node hits.

    ``opacity``, ``hit`` and ``masks`` are ``R x N`` over foreground nodes; a
    node contributes a mask term only on rays that hit its plane.
    """
    if pred.numel() == 0:
        raise ValueError("empty batch")
    loss = ad.abs_(pred - gt).mean()
    if beta and opacity is not None and opacity.numel():
        n = hit.sum()
        if n > 0:
            diff = torch.where(hit, ad.abs_(opacity - masks), torch.zeros_like(opacity))
            loss = loss + beta * diff.sum() / n
    return loss


def batch_rays(graph: SceneGraph, batch: Batch):
    times = graph.time_of(batch.frames)
    cams = graph.camera_pose(times).index(batch.time_index)
    ray = generate_ray(graph.intrinsics, cams, batch.pixels)
    return ray.origin, ray.direction, times


def batch_loss(graph: SceneGraph, batch: Batch, config: TrainConfig, tau: float,
               options: RenderOptions | None = None):
    """Render a batch and score it; returns ``(loss, photometric_mse)``."""
    options = options or RenderOptions(config.use_flow, config.use_view)
    origins, dirs, times = batch_rays(graph, batch)
    out = shade_rays(graph, origins, dirs, times, batch.time_index, tau, options=options)
    opacity = hit = masks = None
    if config.use_mask_loss and batch.node_ids:
        cols = [out.node_ids.index(i) for i in batch.node_ids]
        opacity, hit, masks = out.opacity[:, cols], out.hit[:, cols], batch.masks
    loss = atlas_loss(out.color, batch.colors, opacity, hit, masks, config.beta)
    mse = (out.color.detach() - batch.colors).pow(2).mean().item()
    return loss, mse


# --------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    optimizer: torch.optim.Optimizer
    scheduler: torch.optim.lr_scheduler.ReduceLROnPlateau

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]


def make_optimizer(registry: ParameterRegistry, config: TrainConfig = TrainConfig()) -> OptimizerState:
    params = registry.parameters()
    fused = all(p.dtype in (torch.float32, torch.float64) for p in params)
    opt = torch.optim.Adam(params, lr=config.lr, betas=(0.9, 0.999), eps=1e-8, fused=fused)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode="min", factor=config.plateau_factor, patience=config.plateau_patience,
        threshold=config.plateau_threshold)
    return OptimizerState(opt, sched)


def set_trainable(registry: ParameterRegistry, kinds) -> None:
    """Enable gradients for ``kinds`` only; everything else is frozen."""
    kinds = set(kinds)
    for g in registry.groups:
        g.trainable = g.kind in kinds
        for p in g.params:
            p.requires_grad_(g.trainable)
            if not g.trainable:
                p.grad = None


def step(state: OptimizerState, registry: ParameterRegistry, trainable=None, gradients=None) -> None:
    """One Adam update of the trainable groups.

    Gradients come from ``.grad`` or, if given, from ``gradients`` aligned with
    ``registry.parameters()``. Groups outside ``trainable`` have their
    gradients dropped so their values and moments stay untouched.
    """
    if gradients is not None:
        params = registry.parameters()
        if len(gradients) != len(params):
            raise ValueError(f"expected {len(params)} gradients, got {len(gradients)}")
        for p, g in zip(params, gradients):
            if g is not None and tuple(g.shape) != tuple(p.shape):
                raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
        for p, g in zip(params, gradients):
            p.grad = None if g is None else g.detach().to(p.dtype)
    for g in registry.groups:
        if trainable is not None and g.kind not in trainable:
            for p in g.params:
                p.grad = None
    state.optimizer.step()


# --------------------------------------------------------------------------
# fitting


@dataclass
class EpochLog:
    epoch: int
    loss: float
    batch_psnr: float
    tau: float
    lr: float
    seconds: float
    psnr: float | None = None
    ssim: float | None = None


@dataclass
class FitResult:
    graph: SceneGraph
    history: list[EpochLog]
    state: OptimizerState | None = None
    rng_state: dict | None = None

    @property
    def final(self) -> EpochLog | None:
        return self.history[-1] if self.history else None


def evaluate(graph: SceneGraph, dataset: Dataset, options: RenderOptions | None = None):
    """Per-frame PSNR and SSIM of 8-bit renders against the dataset frames."""
    rows = []
    for k in range(graph.frame_count):
        img = quantize(render_frame(graph, k, options=options or RenderOptions()).double().numpy())
        rows.append((psnr(img, dataset.frames[k]), ssim(img, dataset.frames[k])))
    return rows


def mean_psnr(values) -> float:
    """Mean of per-frame PSNRs; infinite if any frame is reproduced exactly."""
    return float(np.mean(list(values)))


def fit(graph: SceneGraph, dataset: Dataset, config: TrainConfig = TrainConfig(),
        callback: Callable[[EpochLog, SceneGraph], None] | None = None,
        evaluate_final: bool = True) -> FitResult:
    """Fit ``graph`` to ``dataset`` in place."""
    rng = np.random.default_rng(config.seed)
    registry = ParameterRegistry.from_graph(graph)
    state = make_optimizer(registry, config)
    options = RenderOptions(config.use_flow, config.use_view)
    excluded = set()
    if not config.use_flow:
        excluded.add("flow_field")
    if not config.use_view:
        excluded.add("view_field")
    history: list[EpochLog] = []
    dtype = graph.dtype
    try:
        for epoch in range(config.epochs):
            t0 = time.perf_counter()
            tau = tau_schedule(epoch, config.epochs)
            kinds = phase_gate(epoch, config) - excluded
            set_trainable(registry, kinds)
            losses, mses = [], []
            for b in range(config.batches_per_epoch):
                batch = sample_batch(dataset, config.rays_per_batch, config.timestamps_per_batch, rng, dtype)
                loss, mse = batch_loss(graph, batch, config, tau, options)
                if not torch.isfinite(loss):
                    raise FloatingPointError(f"non-finite loss {loss.item()} at epoch {epoch}, batch {b}")
                for p in registry.parameters(kinds):
                    p.grad = None
                loss.backward()
                step(state, registry, kinds)
                losses.append(loss.item())
                mses.append(mse)
            mean_loss = float(np.mean(losses)) if losses else 0.0
            if epoch >= config.plateau_start:
                state.scheduler.step(mean_loss)
            graph.tau = tau
            entry = EpochLog(epoch, mean_loss, -10 * math.log10(max(np.mean(mses), 1e-20)), tau,
                             state.lr, time.perf_counter() - t0)
            if evaluate_final and epoch == config.epochs - 1:
                with torch.no_grad():
                    rows = evaluate(graph, dataset, options)
                entry.psnr = mean_psnr(r[0] for r in rows)
                entry.ssim = float(np.mean([r[1] for r in rows]))
            history.append(entry)
            log.info("epoch %d loss %.5f batch psnr %.2f tau %.3f lr %.2g (%.1fs)", epoch, entry.loss,
                     entry.batch_psnr, tau, entry.lr, entry.seconds)
            if callback is not None:
                callback(entry, graph)
    finally:
        set_trainable(registry, ())
    return FitResult(graph, history, state, rng.bit_generator.state)


def gradcheck_graph(graph, ds, samples: int = 200, seed: int = 0, step: float = 1e-5,
                    rays: int = 256, timestamps: int = 2, perturb: float = 0.0) -> GradCheckReport:
    """Central-difference check of the atlas loss in 64-bit on a fixed batch.

    The graph is converted to 64-bit in place. ``perturb`` adds Gaussian noise
    to every parameter first, so zero-initialized heads do not hide the
    gradients of the layers behind them.
    """
    graph = graph.double()
    gen = torch.Generator().manual_seed(seed)
    registry = ParameterRegistry.from_graph(graph)
    with torch.no_grad():
        if perturb > 0:
            for p in registry.parameters():
                p.add_(perturb * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    for p in registry.parameters():
        p.requires_grad_(True)
    batch = sample_batch(ds, rays, min(timestamps, ds.frame_count), np.random.default_rng(seed),
                         torch.float64)
    config = TrainConfig(dtype="float64")

    def loss():
        return batch_loss(graph, batch, config, tau=1.0)[0]

    return grad_check(loss, registry, step=step, samples=samples, seed=seed)


LOG_COLUMNS = ("epoch", "loss", "batch_psnr", "psnr", "ssim", "tau", "lr", "seconds")


def write_log(history: list[EpochLog], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for e in history:
            w.writerow(["" if getattr(e, c) is None else getattr(e, c) for c in LOG_COLUMNS])


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
