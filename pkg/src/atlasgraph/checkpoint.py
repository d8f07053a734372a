"""``.nag`` checkpoints: a text header line, a JSON structure header, raw tensor blocks.

Layout::

    NAG <version> <header bytes> <sha256 of header>\\n
    <header JSON>
    <tensor blocks, little-endian, in header order>

The header records the graph structure, every tensor's name, shape and
dtype, a SHA-256 of the payload, and optional training state.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .editing import EditTexture
from .fields import FieldStack, HashEncodingConfig
from .geometry import CameraIntrinsics, Rigid
from .motion import RigidTrack
from .scenegraph import AtlasNode, SceneGraph

MAGIC = "NAG"
VERSION = 1

_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}
_TORCH = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def _track_info(track: RigidTrack) -> dict:
    return {"frames": track.frames, "control_points": track.control_points,
            "eta_t": track.eta_t, "eta_r": track.eta_r}


def _structure(graph: SceneGraph) -> dict:
    intr = graph.intrinsics
    nodes = []
    for n in graph.ordered_nodes():
        nodes.append({
            "id": n.node_id,
            "background": n.is_background,
            "time_shift": n.time_shift,
            "grid": list(n.base_color.shape[:2]),
            "flow_points": n.fields.flow_points,
            "hash": n.fields.config.to_dict(),
            "track": None if n.track is None else _track_info(n.track),
            "edits": [list(e.color.shape[:2]) for e in n.edits],
        })
    return {
        "dtype": str(graph.dtype).replace("torch.", ""),
        "frame_count": graph.frame_count,
        "tau": graph.tau,
        "intrinsics": {"fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
                       "width": intr.width, "height": intr.height},
        "camera": _track_info(graph.camera),
        "nodes": nodes,
    }


def save_checkpoint(graph: SceneGraph, path, train_config: dict | None = None,
                    rng_state: dict | None = None, extra: dict | None = None) -> Path:
    """Write ``graph`` (and optional training state) to ``path``."""
    state = graph.state_dict()
    names = sorted(state)
    blocks, tensors = [], []
    for name in names:
        t = state[name].detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"cannot store {name} of dtype {t.dtype}")
        data = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
        tensors.append({"name": name, "shape": list(t.shape), "dtype": _DTYPES[t.dtype],
                        "nbytes": len(data)})
        blocks.append(data)
    payload_hash = hashlib.sha256()
    for b in blocks:
        payload_hash.update(b)
    header = {
        "graph": _structure(graph),
        "tensors": tensors,
        "payload_sha256": payload_hash.hexdigest(),
        "train_config": train_config,
        "rng_state": rng_state,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True, default=_jsonable).encode()
    first = f"{MAGIC} {VERSION} {len(hbytes)} {hashlib.sha256(hbytes).hexdigest()}\n".encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(first)
        fh.write(hbytes)
        for b in blocks:
            fh.write(b)
    tmp.replace(path)
    return path


def _jsonable(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def read_header(path) -> tuple[dict, int]:
    """Parse and verify the header; returns ``(header, payload offset)``."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        first = fh.readline(512)
        parts = first.decode("ascii", errors="replace").split()
        if len(parts) != 4 or parts[0] != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        try:
            version, hlen = int(parts[1]), int(parts[2])
        except ValueError:
            raise CheckpointError(f"{path}: corrupt header line") from None
        if version != VERSION:
            raise CheckpointError(f"{path}: format version {version}, expected {VERSION}")
        hbytes = fh.read(hlen)
    if len(hbytes) != hlen:
        raise CheckpointError(f"{path}: truncated header")
    if hashlib.sha256(hbytes).hexdigest() != parts[3]:
        raise CheckpointError(f"{path}: header checksum mismatch")
    return json.loads(hbytes), len(first) + hlen


def _skeleton(info: dict) -> SceneGraph:
    """An empty graph with the recorded structure, to be filled from the payload."""
    f64 = torch.float64
    intr = CameraIntrinsics(**info["intrinsics"])

    def track(t):
        q = torch.zeros(t["frames"], 4, dtype=f64)
        q[:, 0] = 1
        return RigidTrack(torch.zeros(t["frames"], 3, dtype=f64), q, t["control_points"],
                          t["eta_t"], t["eta_r"])

    nodes = []
    with torch.random.fork_rng():
        for n in info["nodes"]:
            h, w = n["grid"]
            fields = FieldStack(n["flow_points"], HashEncodingConfig(**n["hash"]),
                                with_alpha=not n["background"])
            if n["background"]:
                node = AtlasNode(n["id"], torch.zeros(h, w, 3), None, [1.0, 1.0], fields,
                                 fixed_pose=Rigid.identity())
            else:
                node = AtlasNode(n["id"], torch.zeros(h, w, 3), torch.zeros(h, w), [1.0, 1.0],
                                 fields, track=track(n["track"]))
            node.time_shift = n["time_shift"]
            for eh, ew in n["edits"]:
                node.edits.append(EditTexture(torch.zeros(eh, ew, 3), torch.zeros(eh, ew)))
            nodes.append(node)
    graph = SceneGraph(nodes, track(info["camera"]), intr, info["frame_count"])
    graph.tau = info["tau"]
    return graph.to(getattr(torch, info["dtype"]))


def load_checkpoint(path, with_header: bool = False):
    """Read a checkpoint; returns the graph, or ``(graph, header)``."""
    header, offset = read_header(path)
    expected = offset + sum(t["nbytes"] for t in header["tensors"])
    size = Path(path).stat().st_size
    if size != expected:
        raise CheckpointError(f"{path}: {'truncated' if size < expected else 'trailing data'} "
                              f"({size} bytes, expected {expected})")
    state = {}
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        fh.seek(offset)
        for t in header["tensors"]:
            data = fh.read(t["nbytes"])
            digest.update(data)
            arr = np.frombuffer(data, dtype=t["dtype"]).reshape(t["shape"])
            state[t["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    if digest.hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    graph = _skeleton(header["graph"])
    try:
        graph.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"{path}: tensors do not match the recorded structure: {e}") from None
    graph.requires_grad_(False)
    return (graph, header) if with_header else graph
