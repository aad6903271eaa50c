import numpy as np
import torch
from plyfile import PlyData

from tetsplat.ply import export_ply, field_to_splats, read_ply, write_ply


def test_roundtrip_matches_gaussians(field_factory, tmp_path):
    fld = field_factory(seed=5, sh_degree=3)
    export_ply(fld, "homeo", tmp_path / "s.ply")
    back = read_ply(tmp_path / "s.ply")
    with torch.no_grad():
        g = fld.gaussians(np.zeros(3), "homeo")
    mu, cov = g.means.numpy(), g.covs.numpy()
    assert len(back["means"]) == len(fld.visible_leaves()) == len(mu)
    assert np.abs(back["means"] - mu).max() <= 1e-5 * np.abs(mu).max()
    rel = np.linalg.norm(back["covs"] - cov, axis=(1, 2)) / np.linalg.norm(cov, axis=(1, 2))
    assert rel.max() < 1e-5
    np.testing.assert_allclose(1 / (1 + np.exp(-back["opacity_raw"])), g.opacities.numpy(), rtol=1e-6)


def test_layout(field_factory, tmp_path):
    fld = field_factory(seed=6, sh_degree=3, n_masked=0)
    export_ply(fld, "none", tmp_path / "s.ply")
    el = PlyData.read(str(tmp_path / "s.ply"))["vertex"]
    names = [p.name for p in el.properties]
    assert names[:9] == ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    assert names[9:54] == ["f_rest_%d" % i for i in range(45)]
    assert names[54:] == ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    assert all(p.val_dtype in ("f4", "float32") for p in el.properties)
    q = np.stack([el.data["rot_%d" % i] for i in range(4)], 1)
    np.testing.assert_allclose(np.linalg.norm(q, axis=1), 1, atol=1e-6)


def test_sh_channel_major(tmp_path):
    rng = np.random.default_rng(0)
    sh = rng.normal(size=(3, 4, 3))
    covs = np.tile(np.diag([3.0, 2.0, 1.0]), (3, 1, 1))
    write_ply(tmp_path / "a.ply", rng.normal(size=(3, 3)), covs, sh, np.zeros(3))
    v = PlyData.read(str(tmp_path / "a.ply"))["vertex"].data
    # f_rest_k for channel c and coefficient j (j >= 1) sits at k = c * 3 + (j - 1)
    assert np.float32(sh[1, 2, 1]) == v["f_rest_%d" % (1 * 3 + 1)][1]
    back = read_ply(tmp_path / "a.ply")
    np.testing.assert_allclose(back["sh"], sh, rtol=1e-6, atol=1e-7)
    np.testing.assert_allclose(back["scales"], np.tile(np.sqrt([3.0, 2.0, 1.0]), (3, 1)), rtol=1e-6)


def test_blended_sh(field_factory):
    fld = field_factory(seed=7, sh_degree=1)
    _, _, sh, _ = field_to_splats(fld, "homeo")
    # the DC colour is linear in the coefficients, so the weight blend reproduces it exactly
    fld.sh_degree = 0
    with torch.no_grad():
        g = fld.gaussians(np.zeros(3), "homeo")
    np.testing.assert_allclose(np.clip(0.28209479177387814 * sh[:, 0] + 0.5, 0, 1), g.colors.numpy(), atol=1e-12)


def test_empty(field_factory, tmp_path):
    fld = field_factory(seed=1, n_split=0, n_masked=0)
    fld.masked[:] = True
    export_ply(fld, "none", tmp_path / "e.ply")
    assert len(read_ply(tmp_path / "e.ply")["means"]) == 0
