import json

import numpy as np
import pytest
import torch
from PIL import Image

from atlasgraph.editing import (EditError, EditOp, EditScript, EditTexture, apply_script, blend_color,
                                blended_node_color, invert_flow, project_texture)
from atlasgraph.fields import query_flow
from atlasgraph.renderer import render_frame, render_layer
from atlasgraph.synth import SynthSpec, synth_scene

D = torch.float64


@pytest.fixture(scope="module")
def static_scene():
    """Static camera, zero flow and view fields: edits are exactly predictable."""
    spec = SynthSpec(frames=8, width=64, height=48, nodes=2, texels=64, uniform_motion=True)
    return synth_scene(11, spec)


def _flow_node(rng, scale):
    from atlasgraph.fields import FieldStack, HashEncodingConfig
    cfg = HashEncodingConfig(levels=2, features_per_level=2, per_level_scale=2.0, log2_hashmap_size=6,
                             base_resolution=2)
    fs = FieldStack(4, cfg).double()
    with torch.no_grad():
        fs.flow.encoding.table.uniform_(-1, 1)
        for layer in fs.flow.mlp.hidden:
            layer.weight.normal_(0, (2 / layer.in_features) ** 0.5)
        fs.flow.mlp.head.weight.normal_(0, scale)

    class N:
        fields = fs
    return N()


def test_invert_zero_and_constant_flow(rng):
    node = _flow_node(rng, 0.0)
    xt = torch.as_tensor(rng.uniform(0.1, 0.9, size=(30, 2)))
    x, ok = invert_flow(node, xt, 0.4)
    assert torch.equal(x, xt) and ok.all()
    with torch.no_grad():
        node.fields.flow.mlp.head.bias[:] = torch.tensor([0.3, -0.2] * 4, dtype=D)
    x, ok = invert_flow(node, xt, 0.4)
    assert ok.all()
    assert torch.allclose(x, xt - torch.tensor([0.03, -0.02], dtype=D), atol=1e-15)


def _grid_oracle(node, target, t, levels=3, n=512):
    """Nearest preimage by successively refined dense grid searches."""
    lo, hi = np.zeros(2), np.ones(2)
    for _ in range(levels):
        us = np.linspace(lo[0], hi[0], n)
        vs = np.linspace(lo[1], hi[1], n)
        g = torch.as_tensor(np.stack(np.meshgrid(us, vs, indexing="xy"), -1).reshape(-1, 2))
        with torch.no_grad():
            res = (g + query_flow(node.fields, g, torch.full((g.shape[0],), t, dtype=D)) - target).norm(dim=-1)
        best = g[res.argmin()].numpy()
        span = 4 * (hi - lo) / (n - 1)
        lo, hi = best - span, best + span
    return best


def test_invert_random_flow_matches_grid_search(rng):
    node = _flow_node(rng, 0.05)
    xt = torch.as_tensor(rng.uniform(0.2, 0.8, size=(4, 2)))
    x, ok = invert_flow(node, xt, 0.7)
    assert ok.all()
    for i in range(4):
        ref = _grid_oracle(node, xt[i], 0.7)
        assert np.abs(x[i].numpy() - ref).max() < 2e-5


def test_invert_reports_non_convergence(rng):
    node = _flow_node(rng, 0.05)
    x, ok = invert_flow(node, torch.tensor([0.5, 0.5], dtype=D), 0.3, max_iter=1, tol=1e-14)
    assert ok is False


def test_blend_color_examples():
    c = torch.tensor([0.2], dtype=D)
    assert blend_color(c, torch.tensor([0.8], dtype=D), torch.tensor([0.0], dtype=D)).item() == 0.2
    assert blend_color(c, torch.tensor([0.8], dtype=D), torch.tensor([1.0], dtype=D)).item() == 0.8
    assert blend_color(c, torch.tensor([0.8], dtype=D), torch.tensor([0.5], dtype=D)).item() == pytest.approx(0.5)
    with pytest.raises(EditError):
        EditTexture(torch.zeros(4, 4, 3), torch.zeros(3, 4))


def _texture(h, w, rgb, alpha):
    tex = np.zeros((h, w, 4))
    tex[..., :3] = rgb
    tex[..., 3] = alpha
    return tex


def test_transparent_texture_changes_nothing(static_scene):
    ds, gt = static_scene
    node = gt.foreground[0].node_id
    intr = gt.intrinsics
    edit = project_texture(gt, node, _texture(intr.height, intr.width, 0.7, 0.0), 0)
    assert not edit.alpha.any()
    g2 = apply_script(gt, EditScript())
    g2.node(node).edits.append(edit)
    for k in (0, 5):
        assert torch.equal(render_frame(g2, k), render_frame(gt, k))


def test_opaque_red_texture(static_scene):
    ds, gt = static_scene
    intr = gt.intrinsics
    node = gt.foreground[0]
    g2 = apply_script(gt, EditScript())
    g2.node(node.node_id).edits.append(
        project_texture(gt, node.node_id, _texture(intr.height, intr.width, (1.0, 0.0, 0.0), 1.0), 0))
    for k in (0, 4, 7):
        layer = render_layer(gt, node.node_id, k)
        img = render_frame(g2, k)
        solid = layer[..., 3] > 1 - 1e-3
        # the node is unoccluded in the synthetic scenes
        assert solid.sum() > 30
        red = torch.tensor([1.0, 0.0, 0.0], dtype=img.dtype)
        assert (img[solid] - red).abs().max() < 2e-3


def test_texture_matches_image_space_matting(static_scene):
    ds, gt = static_scene
    intr = gt.intrinsics
    node = gt.foreground[1]
    ref = 3
    rng = np.random.default_rng(0)
    v, u = np.meshgrid(np.arange(intr.height) + 0.5, np.arange(intr.width) + 0.5, indexing="ij")
    rgb = np.stack([0.5 + 0.4 * np.sin(u / 7 + c) * np.cos(v / 5) for c in range(3)], -1)
    alpha = np.clip(0.5 + 0.5 * np.sin(u / 9 + rng.uniform()), 0, 1)
    tex = np.concatenate([rgb, alpha[..., None]], -1)
    g2 = apply_script(gt, EditScript())
    g2.node(node.node_id).edits.append(project_texture(gt, node.node_id, tex, ref))
    before = render_frame(gt, ref).numpy()
    after = render_frame(g2, ref).numpy()
    w = render_layer(gt, node.node_id, ref)[..., 3].numpy()
    solid = w > 1 - 1e-3
    oracle = (1 - alpha[..., None]) * before + alpha[..., None] * rgb
    assert np.abs(after - oracle)[solid].max() <= 1 / 255
    # rays whose hit is outside the node change by less than the edge leakage of the edit
    away = w < 1e-6
    assert np.array_equal(after[away], before[away])


def test_edit_is_view_consistent(static_scene):
    _, gt = static_scene
    node = gt.foreground[0]
    intr = gt.intrinsics
    g2 = apply_script(gt, EditScript())
    n2 = g2.node(node.node_id)
    n2.edits.append(project_texture(gt, node.node_id, _texture(intr.height, intr.width, 0.3, 1.0), 0))
    x = torch.rand(50, 2, dtype=D)
    phi = torch.rand(50, 2, dtype=D)
    a = blended_node_color(n2, x, phi, torch.zeros(50, dtype=D))
    b = blended_node_color(n2, x, phi, torch.ones(50, dtype=D))
    assert torch.equal(a, b)


def test_remove_is_local(static_scene):
    _, gt = static_scene
    node = gt.foreground[0].node_id
    out = apply_script(gt, EditScript([EditOp("remove", node)]))
    assert len(out.foreground) == len(gt.foreground) - 1
    for k in (0, 6):
        layer = render_layer(gt, node, k)[..., 3]
        far = layer < 1e-6
        assert far.any()
        assert torch.equal(render_frame(out, k)[far], render_frame(gt, k)[far])


def test_duplicate_translates_pose(static_scene):
    _, gt = static_scene
    node = gt.foreground[0].node_id
    out = apply_script(gt, EditScript([EditOp("duplicate", node, delta_translation=[2.0, 0.0, 0.0])]))
    assert len(out.nodes) == len(gt.nodes) + 1
    dup = max(n.node_id for n in out.nodes)
    assert dup not in [n.node_id for n in gt.nodes]
    t = torch.linspace(0, 1, 11, dtype=D)
    a, b = gt.node(node).pose(t), out.node(dup).pose(t)
    assert torch.allclose(b.translation - a.translation, torch.tensor([2.0, 0, 0], dtype=D).expand(11, 3),
                          atol=1e-12)
    assert torch.equal(a.rotation, b.rotation)


def test_time_shift_matches_earlier_frames(static_scene):
    _, gt = static_scene
    node = gt.foreground[1].node_id
    out = apply_script(gt, EditScript([EditOp("time_shift", node, delta_t=5)]))
    for k in (5, 6):
        a = render_layer(out, node, k)
        b = render_layer(gt, node, k - 5)
        assert (a - b).abs().max() < 1e-9


def test_apply_script_is_pure(static_scene):
    _, gt = static_scene
    before = gt.digest()
    apply_script(gt, EditScript([EditOp("remove", 0), EditOp("duplicate", 1, [0, 1.0, 0], 2),
                                 EditOp("translate", 1, [0.1, 0, 0]), EditOp("time_shift", 1, delta_t=1)]))
    assert gt.digest() == before


def test_edit_errors(static_scene):
    _, gt = static_scene
    with pytest.raises(EditError):
        apply_script(gt, EditScript([EditOp("remove", gt.background.node_id)]))
    with pytest.raises(KeyError):
        apply_script(gt, EditScript([EditOp("translate", 99, [0, 0, 0])]))
    with pytest.raises(EditError):
        EditOp("explode", 0)
    with pytest.raises(EditError):
        EditOp("texture", 0)
    with pytest.raises(EditError):
        EditScript.from_dict({"ops": [{"op": "remove", "node": 0, "bogus": 1}]})
    with pytest.raises(EditError):
        project_texture(gt, 0, np.zeros((3, 3, 4)), 0)


def test_script_roundtrip_and_texture_op(static_scene, tmp_path):
    _, gt = static_scene
    intr = gt.intrinsics
    img = np.zeros((intr.height, intr.width, 4), np.uint8)
    img[..., 1] = 255
    img[..., 3] = 255
    Image.fromarray(img, "RGBA").save(tmp_path / "green.png")
    script = EditScript([EditOp("texture", 0, image="green.png", reference_frame=2),
                         EditOp("time_shift", 1, delta_t=-1.0)])
    script.save(tmp_path / "s.json")
    loaded = EditScript.load(tmp_path / "s.json")
    assert loaded.to_dict() == script.to_dict()
    assert json.loads((tmp_path / "s.json").read_text())["ops"][0]["op"] == "texture"
    out = apply_script(gt, loaded)
    assert len(out.node(0).edits) == 1 and out.node(1).time_shift == pytest.approx(-1 / 7)
