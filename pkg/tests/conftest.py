import numpy as np
import pytest
import torch

from atlasgraph.fields import HashEncodingConfig
from atlasgraph.scenegraph import GraphConfig, build_graph
from atlasgraph.synth import SynthSpec, synth_scene

# small encodings keep unit tests fast; acceptance tests use the full configuration
SMALL_HASH = HashEncodingConfig(levels=4, features_per_level=2, per_level_scale=1.5,
                                log2_hashmap_size=10, base_resolution=4)


@pytest.fixture(scope="session")
def tiny_scene():
    """A 2-node 32x24 scene with 6 frames and its ground truth."""
    spec = SynthSpec(frames=6, width=40, height=28, nodes=2, texels=32, motion=0.15)
    return synth_scene(3, spec)


@pytest.fixture
def tiny_graph(tiny_scene):
    ds, _ = tiny_scene
    torch.manual_seed(0)
    return build_graph(ds, GraphConfig(hash=SMALL_HASH), dtype=torch.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def plane_graph(planes, background=(0.2, 0.4, 0.6), size=(16, 12), focal=20.0, frames=2,
                bg_depth=10.0, hash_config=None):
    """Camera at the origin looking down +z; fronto-parallel planes ``(id, depth, color, alpha)``.

    Grids are 4x4 constants; the background is fully opaque at ``bg_depth``.
    """
    from atlasgraph.fields import FieldStack
    from atlasgraph.geometry import CameraIntrinsics, Rigid
    from atlasgraph.motion import RigidTrack
    from atlasgraph.scenegraph import AtlasNode, SceneGraph

    cfg = hash_config or HashEncodingConfig(levels=2, features_per_level=2, log2_hashmap_size=6)
    d = torch.float64
    w, h = size
    intr = CameraIntrinsics(focal, focal, w / 2, h / 2, w, h)
    ident = torch.tensor([[1.0, 0, 0, 0]], dtype=d).repeat(frames, 1)
    cam = RigidTrack(torch.zeros(frames, 3, dtype=d), ident)
    nodes = []
    for node_id, depth, color, alpha in planes:
        track = RigidTrack(torch.tensor([[0.0, 0, depth]], dtype=d).repeat(frames, 1), ident)
        nodes.append(AtlasNode(node_id, torch.tensor(color, dtype=d).expand(4, 4, 3),
                               torch.full((4, 4), float(alpha), dtype=d), [3.0 * depth, 3.0 * depth],
                               FieldStack(4, cfg), track=track))
    bg_id = max([p[0] for p in planes], default=-1) + 1
    pose = Rigid(torch.tensor([1.0, 0, 0, 0], dtype=d), torch.tensor([0.0, 0, bg_depth], dtype=d))
    nodes.append(AtlasNode(bg_id, torch.tensor(background, dtype=d).expand(4, 4, 3), None,
                           [4.0 * bg_depth, 4.0 * bg_depth], FieldStack(4, cfg, with_alpha=False),
                           fixed_pose=pose))
    return SceneGraph(nodes, cam, intr, frames).double()


# acceptance criteria report, printed at the end of the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
