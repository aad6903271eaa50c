import numpy as np
import pytest
import torch

from tetsplat.field import MODES, StructuredField, check_mode, domain_box, inverse_sigmoid
from tetsplat.hierarchy import constrain_barycentric
from tetsplat.splat import orbit_cameras
from tetsplat.tetmesh import build_uniform_grid, signed_volumes


@pytest.fixture
def field():
    torch.manual_seed(0)
    f = StructuredField(build_uniform_grid(([0, 0, 0], [1, 1, 1]), (2, 1, 1)), sh_degree=1)
    with torch.no_grad():
        f.sh.normal_(0, 0.3)
        f.weights_raw.uniform_(0.05, 0.5)
        f.opacity_raw.normal_(0, 1)
    return f


def cam(w=24):
    return orbit_cameras(1, [0.5, 0.5, 0.5], 3.0, w, w)[0]


def test_init_values():
    f = StructuredField(build_uniform_grid(([0, 0, 0], [1, 1, 1]), (1, 1, 1)))
    assert f.sh.shape == (8, 16, 3)
    assert torch.all(f.weights_raw == 0.1)
    torch.testing.assert_close(torch.sigmoid(f.opacity_raw), torch.full((6,), 0.1, dtype=torch.float64))
    assert torch.all(f.rotation[:, 0] == 1) and torch.all(f.rotation[:, 1:] == 0)
    assert inverse_sigmoid(0.5) == 0.0


def test_mode_validation():
    for m in MODES:
        check_mode(m)
    with pytest.raises(ValueError):
        check_mode("homeomorphism")


def test_domain_box_padding():
    lo, hi = domain_box(np.array([[0, 0, 0], [2, 1, 1.0]]))
    np.testing.assert_allclose(lo, [-0.2, -0.1, -0.1])
    np.testing.assert_allclose(hi, [2.2, 1.1, 1.1])


def test_identity_map_matches_rest(field):
    for mode in MODES:
        np.testing.assert_allclose(field.base_numpy(mode), field.mesh.vertices, atol=1e-15)


def test_split_inherits_and_grows(field):
    n0, p0 = field.forest.n_nodes, field.forest.n_points
    with torch.no_grad():
        field.control_raw[2] = torch.tensor([3.0, -1, 0, 0.5])
    parent_w = field.weights_raw[2].detach().clone()
    parent_op = field.opacity_raw[2].item()
    corners = field.forest.corners(2).copy()
    done = field.split([2, 7])
    field.check_consistency()
    assert len(done) == 2
    assert field.forest.n_nodes == n0 + 8 and field.forest.n_points == p0 + 2
    n, kids, c = done[0]
    # centroid init overrides whatever the raw control held
    assert torch.all(field.control_raw[2] == 0)
    b = constrain_barycentric(torch.zeros(4, dtype=torch.float64))
    for i, k in enumerate(kids):
        assert field.opacity_raw[k].item() == parent_op
        torch.testing.assert_close(field.weights_raw[k][i], (b * parent_w).sum())
        others = [j for j in range(4) if j != i]
        torch.testing.assert_close(field.weights_raw[k][others], parent_w[others])
    expect_sh = (b[:, None, None] * field.sh[torch.from_numpy(corners)]).sum(0)
    torch.testing.assert_close(field.sh[c], expect_sh)


def test_split_skips_internal_and_new(field):
    done = field.split([0])
    kids = done[0][1]
    assert field.split([0]) == []
    # a child created in the same batch is left for a later call
    again = field.split([1, int(kids[0]) + 100])
    assert [d[0] for d in again] == [1]


def test_split_preserves_centroid_volume(field):
    field.split(range(field.forest.n_nodes))
    P = field.points("none").detach().numpy()
    leaves = field.forest.leaf_tets
    vols = signed_volumes(P, leaves)
    assert np.all(vols > 0)
    assert vols.sum() == pytest.approx(1.0, abs=1e-12)


def test_masked_leaves_bit_identical(field):
    field.split([0, 4])
    leaves = field.forest.leaves
    drop = leaves[[1, 5, 6]]
    field.masked[drop] = True
    c = cam()
    flagged, _ = field.render(c, "none")
    keep = np.setdiff1d(leaves, drop)
    explicit, _ = field.render(c, "none", nodes=keep)
    assert torch.equal(flagged.rgb, explicit.rgb) and torch.equal(flagged.alpha, explicit.alpha)


def test_render_level_full_depth_equals_leaves(field):
    field.split([0, 3])
    field.split([field.forest.children(0)[2]])
    c = cam()
    a, _ = field.render(c, "none")
    b, nodes = field.render_level(c, "none", 10)
    np.testing.assert_array_equal(np.sort(nodes), field.forest.leaves)
    torch.testing.assert_close(a.rgb, b.rgb, rtol=0, atol=1e-14)


def test_gradients_reach_every_group(field):
    field.split([1])
    out, _ = field.render(cam(), "homeo")
    out.rgb.sum().backward()
    for p in (field.sh, field.weights_raw, field.opacity_raw, field.rotation, field.control_raw):
        assert p.grad is not None and torch.isfinite(p.grad).all()
    # zero-initialised output layers: only those receive gradient at the identity
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in field.map.parameters())
    assert field.vertex_offset.grad is None
