"""Reverse-mode differentiation over render-and-loss computations.

Autograd itself is torch's; this module adds what the fitting pipeline needs
on top of it: a named parameter registry, a thin tape wrapper, the
piecewise primitives used throughout the renderer (each one can report the
branch it took), and a finite-difference gradient checker that skips
samples whose perturbation crosses a branch boundary.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

# --------------------------------------------------------------------------
# branch-recording primitives

_RECORDERS: list[list[torch.Tensor]] = []


def _record(branch: torch.Tensor) -> None:
    if _RECORDERS:
        _RECORDERS[-1].append(branch.detach().clone())


@contextlib.contextmanager
def record_branches():
    """Collect the branch pattern of every piecewise primitive evaluated inside."""
    log: list[torch.Tensor] = []
    _RECORDERS.append(log)
    try:
        yield log
    finally:
        _RECORDERS.pop()


def same_branches(a: Sequence[torch.Tensor], b: Sequence[torch.Tensor]) -> bool:
    if len(a) != len(b):
        return False
    return all(x.shape == y.shape and torch.equal(x, y) for x, y in zip(a, b))


def relu(x: torch.Tensor) -> torch.Tensor:
    _record(x > 0)
    return torch.relu(x)


def clamp(x: torch.Tensor, lo: float, hi: float) -> torch.Tensor:
    """Clamp with zero subgradient outside [lo, hi]."""
    _record((x < lo).to(torch.int8) - (x > hi).to(torch.int8))
    return torch.clamp(x, lo, hi)


def abs_(x: torch.Tensor) -> torch.Tensor:
    _record(x > 0)
    return torch.abs(x)


def floor(x: torch.Tensor) -> torch.Tensor:
    """Detached floor; the integer cell is recorded as a branch."""
    f = torch.floor(x.detach())
    _record(f.to(torch.int64))
    return f


def branch(mask: torch.Tensor) -> torch.Tensor:
    """Register a boolean/integer selection (hit tests, orderings)."""
    _record(mask)
    return mask


# --------------------------------------------------------------------------
# parameter registry

GROUP_KINDS = ("camera_offsets", "node_offsets", "color_field", "alpha_field",
               "flow_field", "view_field")


@dataclass
class ParameterGroup:
    name: str
    kind: str
    node_id: int | None
    params: list[torch.Tensor]
    trainable: bool = True

    def numel(self) -> int:
        return sum(p.numel() for p in self.params)

    def flat(self) -> torch.Tensor:
        return torch.cat([p.detach().reshape(-1) for p in self.params])


@dataclass
class ParameterRegistry:
    groups: list[ParameterGroup] = field(default_factory=list)

    @classmethod
    def from_graph(cls, graph) -> "ParameterRegistry":
        reg = cls()
        cam = graph.camera
        reg.groups.append(ParameterGroup("camera_offsets", "camera_offsets", None,
                                         [cam.offset_translation, cam.offset_rotation]))
        for node in graph.ordered_nodes():
            i = node.node_id
            if node.track is not None:
                reg.groups.append(ParameterGroup(f"node_offsets[{i}]", "node_offsets", i,
                                                 [node.track.offset_translation,
                                                  node.track.offset_rotation]))
            for kind, fld in node.fields.named_fields():
                short = kind.split("_")[0]
                reg.groups.append(ParameterGroup(f"{kind}[{i}]", kind, i,
                                                 list(fld.mlp.parameters())))
                reg.groups.append(ParameterGroup(f"hash_tables[{i},{short}]", kind, i,
                                                 [fld.encoding.table]))
        reg._check_disjoint()
        return reg

    def _check_disjoint(self) -> None:
        seen: set[int] = set()
        for g in self.groups:
            for p in g.params:
                if id(p) in seen:
                    raise ValueError(f"parameter registered twice (group {g.name})")
                seen.add(id(p))

    def __iter__(self):
        return iter(self.groups)

    def __getitem__(self, name: str) -> ParameterGroup:
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(name)

    def of_kind(self, kinds: Iterable[str]) -> list[ParameterGroup]:
        kinds = set(kinds)
        return [g for g in self.groups if g.kind in kinds]

    def parameters(self, kinds: Iterable[str] | None = None) -> list[torch.Tensor]:
        groups = self.groups if kinds is None else self.of_kind(kinds)
        return [p for g in groups for p in g.params]


# --------------------------------------------------------------------------
# tape


class UnregisteredPrimitiveError(RuntimeError):
    pass


@dataclass
class Tape:
    inputs: list[torch.Tensor]
    outputs: torch.Tensor | tuple

    def replay(self, f: Callable, *args):
        return f(*args)


def forward_record(f: Callable, inputs: Sequence[torch.Tensor]):
    """Evaluate ``f`` with gradient tracking on ``inputs``.

    Returns ``(outputs, tape)``. Raises if the output does not depend on the
    tracked inputs through differentiable operations while it should.
    """
    leaves = []
    for x in inputs:
        if not x.requires_grad:
            x.requires_grad_(True)
        leaves.append(x)
    with torch.enable_grad():
        out = f(*leaves)
    first = out[0] if isinstance(out, tuple) else out
    if first.grad_fn is None and not any(first is x for x in leaves):
        # constant outputs are fine; anything computed outside autograd is not
        if first.requires_grad:
            raise UnregisteredPrimitiveError("output detached from the tape")
    return out, Tape(inputs=leaves, outputs=out)


def backward(tape: Tape, seed: float = 1.0, params: Sequence[torch.Tensor] | None = None):
    """Reverse pass from a scalar output; returns gradients aligned with ``params``."""
    out = tape.outputs[0] if isinstance(tape.outputs, tuple) else tape.outputs
    if out.numel() != 1:
        raise ValueError("backward needs a scalar output")
    targets = list(params) if params is not None else tape.inputs
    if not out.requires_grad:
        return [torch.zeros_like(p) for p in targets]
    grads = torch.autograd.grad(out, targets, grad_outputs=torch.full_like(out, seed),
                                allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(targets, grads)]


# --------------------------------------------------------------------------
# gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    samples: int
    skipped_kinks: int
    per_group: dict[str, float]
    worst: tuple[str, int, float, float] | None = None

    def __str__(self) -> str:
        lines = [f"max relative error: {self.max_rel_error:.3e} "
                 f"({self.samples} samples, {self.skipped_kinks} kink neighborhoods skipped)"]
        for name, err in self.per_group.items():
            lines.append(f"  {name:<28s} {err:.3e}")
        return "\n".join(lines)


def relative_error(g_ad: float, g_fd: float) -> float:
    return abs(g_ad - g_fd) / max(1e-8, abs(g_ad) + abs(g_fd))


def grad_check(f: Callable[[], torch.Tensor], registry: ParameterRegistry | Sequence[ParameterGroup],
               step: float = 1e-5, samples: int = 200, seed: int = 0,
               max_retries: int = 20) -> GradCheckReport:
    """Compare autograd against central differences on random parameters.

    ``f`` takes no arguments and reads the registry's tensors. Samples are
    spread evenly over the groups. Within a group, entries with a nonzero
    analytic gradient are preferred (most hash-table rows are untouched by a
    batch and would make the check vacuous). A sample whose +/- perturbation
    changes any recorded branch is redrawn; after ``max_retries`` redraws,
    fresh entries are tried at steps 10, 100 and 1000 times smaller. A sample
    that never stays on one branch is dropped. Every rejected draw counts in
    ``skipped_kinks``.
    """
    groups = list(registry)
    rng = np.random.default_rng(seed)
    params = [p for g in groups for p in g.params]
    frozen = [p for p in params if not p.requires_grad]
    for p in frozen:
        p.requires_grad_(True)
    try:
        with torch.enable_grad():
            loss = f()
            grads = torch.autograd.grad(loss, params, allow_unused=True)
    finally:
        for p in frozen:
            p.requires_grad_(False)
    grads = [torch.zeros_like(p) if g is None else g.detach() for p, g in zip(params, grads)]
    grad_of = {id(p): g for p, g in zip(params, grads)}
    with torch.no_grad(), record_branches() as base:
        f()

    per_group: dict[str, float] = {}
    worst = None
    max_err = 0.0
    skipped = 0
    n_done = 0
    quota = [samples // len(groups) + (1 if k < samples % len(groups) else 0)
             for k in range(len(groups))]
    for g, q in zip(groups, quota):
        flat_grads = torch.cat([grad_of[id(p)].reshape(-1) for p in g.params])
        sizes = [p.numel() for p in g.params]
        active = torch.nonzero(flat_grads).reshape(-1).numpy()
        pool = active if active.size else np.arange(flat_grads.numel())
        g_err = 0.0
        for _ in range(q):
            sample = None
            # a group whose every entry moves many rays (poses) rarely stays on one branch at
            # the nominal step; after the nominal redraws, try fresh entries at smaller steps
            steps = [step] * (max_retries + 1) + [step / 10 ** (1 + a % 3) for a in range(3 * max_retries)]
            for h in steps:
                k = int(pool[rng.integers(pool.size)])
                j, off = _locate(sizes, k)
                fd = _central_difference(f, base, g.params[j].data.reshape(-1), off, h)
                if fd is not None:
                    sample = (k, fd)
                    break
                skipped += 1
            if sample is None:
                continue
            k, g_fd = sample
            g_ad = flat_grads[k].item()
            err = relative_error(g_ad, g_fd)
            n_done += 1
            g_err = max(g_err, err)
            if err >= max_err:
                max_err = err
                worst = (g.name, k, g_ad, g_fd)
        per_group[g.name] = g_err
    return GradCheckReport(max_err, n_done, skipped, per_group, worst)


def _central_difference(f, base, view: torch.Tensor, off: int, h: float) -> float | None:
    """Central difference in one entry, or None if the perturbation leaves the branch pattern ``base``."""
    orig = view[off].item()
    try:
        view[off] = orig + h
        with torch.no_grad(), record_branches() as bp:
            fp = f().item()
        view[off] = orig - h
        with torch.no_grad(), record_branches() as bm:
            fm = f().item()
    finally:
        view[off] = orig
    if not (same_branches(base, bp) and same_branches(base, bm)):
        return None
    return (fp - fm) / (2 * h)


def _locate(sizes: list[int], k: int) -> tuple[int, int]:
    for j, n in enumerate(sizes):
        if k < n:
            return j, k
        k -= n
    raise IndexError(k)


def finite_difference(f: Callable[[float], float], x: float, step: float = 1e-5) -> float:
    return (f(x + step) - f(x - step)) / (2 * step)


__all__ = [
    "relu", "clamp", "abs_", "floor", "branch", "record_branches", "same_branches",
    "ParameterGroup", "ParameterRegistry", "GROUP_KINDS", "Tape", "forward_record",
    "backward", "grad_check", "GradCheckReport", "relative_error",
    "UnregisteredPrimitiveError", "finite_difference",
]
