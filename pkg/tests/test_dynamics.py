import json
import warnings

import numpy as np
import pytest
import torch
from scipy.spatial.transform import Rotation

from tetsplat.dynamics import (
    LatticeConfig,
    LatticeDeformer,
    MassSpringSystem,
    Playback,
    SimConfig,
    apply_lattice,
    build_springs,
    deform_sequence,
    playback,
    polar_rotations,
    select_vertices,
    simulate,
    xpbd_step,
)
from tetsplat.field import StructuredField
from tetsplat.splat import orbit_cameras, render
from tetsplat.tetmesh import TetMesh, build_uniform_grid, signed_volumes
from tetsplat.train import psnr

UNIT_TET = TetMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]]), np.array([[0, 1, 2, 3]]))


def two_particles(dist=2.0, rest=1.0):
    return MassSpringSystem([[0, 0, 0], [dist, 0, 0]], np.zeros((2, 3)), [1.0, 1.0], [[0, 1]], [rest], 0.0,
                            gravity=(0, 0, 0))


class TestSprings:
    def test_single_tet(self):
        s = build_springs(UNIT_TET)
        assert s.n_particles == 4 and len(s.springs) == 6

    def test_grid_edge_count(self):
        mesh = build_uniform_grid(([0, 0, 0], [1, 1, 1]), (1, 1, 1))
        s = build_springs(mesh)
        # brute force: every vertex pair appearing together in some tet
        pairs = {tuple(sorted((int(a), int(b)))) for t in mesh.tets for a in t for b in t if a != b}
        assert len(pairs) == 19 and len(s.springs) == 19
        assert {tuple(e) for e in s.springs.tolist()} == pairs

    def test_total_mass(self):
        mesh = build_uniform_grid(([0, 0, 0], [2, 1, 3]), (2, 3, 2))
        s = build_springs(mesh, density=7.0)
        assert s.masses().sum() == pytest.approx(7.0 * 6.0, rel=1e-12)

    def test_rest_lengths_current(self):
        s = build_springs(UNIT_TET)
        L = np.linalg.norm(s.x[s.springs[:, 0]] - s.x[s.springs[:, 1]], axis=1)
        np.testing.assert_array_equal(L, s.rest)

    def test_rejects_bad(self):
        with pytest.raises(ValueError):
            MassSpringSystem([[0, 0, 0], [1, 0, 0]], np.zeros((2, 3)), [1, 1], [[0, 1]], [0.0], 0.0)
        with pytest.raises(ValueError):
            xpbd_step(two_particles(), 0.0)


class TestXPBD:
    def test_free_particle(self):
        g = np.array([0.0, -9.81, 1.0])
        s = MassSpringSystem([[1.0, 2, 3]], [[0.5, 0, 0]], [1.0], np.zeros((0, 2)), np.zeros(0), 0.0, g)
        dt = 0.01
        xpbd_step(s, dt)
        v = np.array([0.5, 0, 0]) + g * dt
        np.testing.assert_allclose(s.v[0], v, atol=1e-12)
        np.testing.assert_allclose(s.x[0], np.array([1.0, 2, 3]) + v * dt, atol=1e-12)

    def test_two_particle_convergence(self):
        s = two_particles()
        xpbd_step(s, 0.01, iterations=50)
        d = np.linalg.norm(s.x[1] - s.x[0])
        assert abs(d - 1.0) < 1e-6
        # symmetric about the original midpoint
        assert s.x.mean(0)[0] == pytest.approx(1.0, abs=1e-12)

    def test_momentum_conserved(self):
        rng = np.random.default_rng(0)
        mesh = build_uniform_grid(([0, 0, 0], [1, 1, 1]), (2, 2, 2))
        x = mesh.vertices + 0.05 * rng.normal(size=mesh.vertices.shape)
        s = build_springs(mesh)
        s.x = x
        s.inv_mass[:] = 2.0
        s.gravity[:] = 0
        s.v = rng.normal(size=x.shape)
        p0 = s.momentum()
        xpbd_step(s, 0.01, iterations=10, substeps=3)
        assert np.abs(s.momentum() - p0).max() < 1e-10

    def test_pinned_immobile(self):
        mesh = build_uniform_grid(([0, 0, 0], [1, 1, 1]), (2, 2, 2))
        s = build_springs(mesh, compliance=1e-4)
        pins = select_vertices({"box": [[-1, -1, 0.9], [2, 2, 2]]}, s.x)
        assert len(pins) == 9
        s.pin(pins)
        before = s.x[pins].copy()
        for _ in range(20):
            xpbd_step(s, 1 / 60, substeps=4)
        assert np.array_equal(s.x[pins], before)
        assert s.x[:, 2].min() < 0   # the free layer sagged

    def test_fixed_point(self):
        s = build_springs(build_uniform_grid(([0, 0, 0], [1, 1, 1]), (2, 1, 1)), gravity=(0, 0, 0))
        x0 = s.x.copy()
        for _ in range(5):
            xpbd_step(s, 0.01)
            assert np.abs(s.x - x0).max() < 1e-12
            x0 = s.x.copy()

    def test_compliance_softens(self):
        stiff, soft = two_particles(), two_particles()
        soft.compliance[:] = 1.0
        xpbd_step(stiff, 0.01, 10)
        xpbd_step(soft, 0.01, 10)
        assert np.linalg.norm(soft.x[1] - soft.x[0]) > np.linalg.norm(stiff.x[1] - stiff.x[0])


class TestLattice:
    def setup_method(self):
        rng = np.random.default_rng(1)
        self.rest = rng.uniform(0, 1, size=(50, 3))
        self.lat = LatticeDeformer(([0, 0, 0], [1, 1, 1]), (3, 2, 4), self.rest)

    def test_identity_and_translation(self):
        n = 3 * 2 * 4
        np.testing.assert_array_equal(apply_lattice(self.lat, np.zeros((n, 3)), self.rest), self.rest)
        d = np.array([0.3, -0.2, 0.1])
        np.testing.assert_allclose(apply_lattice(self.lat, np.tile(d, (n, 1)), self.rest), self.rest + d,
                                   atol=1e-15)

    def test_weights_partition(self):
        W, _ = self.lat.weights()
        np.testing.assert_allclose(W.sum(1), 1.0, atol=1e-15)

    def test_corner_control(self):
        corners = np.array([[0, 0, 0], [1, 1, 1.0]])
        lat = LatticeDeformer(([0, 0, 0], [1, 1, 1]), (2, 2, 2), corners)
        d = np.zeros((8, 3))
        d[0] = [0.1, 0.2, 0.3]
        out = apply_lattice(lat, d, corners)
        np.testing.assert_allclose(out[0], [0.1, 0.2, 0.3])
        np.testing.assert_array_equal(out[1], corners[1])

    def test_linear(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=(2, 24, 3))
        da, db = self.lat.displacement(a), self.lat.displacement(b)
        np.testing.assert_allclose(self.lat.displacement(2.5 * a - b), 2.5 * da - db, atol=1e-14)

    def test_outside_reported(self):
        pts = np.array([[0.5, 0.5, 0.5], [1.5, 0.5, 0.5]])
        lat = LatticeDeformer(([0, 0, 0], [1, 1, 1]), (2, 2, 2), pts)
        assert lat.n_outside == 1
        with pytest.warns(UserWarning):
            apply_lattice(lat, np.zeros((8, 3)), pts)

    def test_config_interpolation(self):
        cfg = LatticeConfig.from_json(json.dumps({"shape": [2, 2, 2], "frames": 5, "keyframes": [
            {"frame": 0, "displacements": np.zeros((8, 3)).tolist()},
            {"frame": 4, "displacements": np.ones((8, 3)).tolist()}]}))
        np.testing.assert_allclose(cfg.control_displacements(1), 0.25)
        seq, _ = deform_sequence(self.rest, cfg)
        np.testing.assert_allclose(seq[4] - self.rest, 1.0, atol=1e-12)


def random_field(seed=0, degree=3):
    torch.manual_seed(seed)
    f = StructuredField(build_uniform_grid(([0, 0, 0], [1, 1, 1]), (2, 2, 2)), sh_degree=degree)
    with torch.no_grad():
        f.sh.normal_(0, 0.3)
        f.weights_raw.uniform_(0.05, 0.5)
        f.opacity_raw.normal_(0, 1)
        f.rotation.normal_(0, 1)
    f.split([0, 5, 17])
    with torch.no_grad():
        f.control_raw.normal_(0, 0.5)
        f.rotation.normal_(0, 1)
    return f


class TestPlayback:
    def test_polar_rotation_of_rigid(self):
        rng = np.random.default_rng(3)
        R = Rotation.random(10, random_state=4).as_matrix()
        rest = rng.normal(size=(10, 4, 3))
        moved = np.einsum("nij,nkj->nki", R, rest) + rng.normal(size=(10, 1, 3))
        np.testing.assert_allclose(polar_rotations(rest, moved), R, atol=1e-12)

    def test_constant_sequence(self):
        f = random_field()
        cam = orbit_cameras(1, [0.5, 0.5, 0.5], 3.0, 24, 24)[0]
        X = f.base_numpy("none")
        frames, info = playback(f, "none", [X, X.copy()], cam)
        assert torch.equal(frames[0].rgb, frames[1].rgb)
        assert info[0]["inverted"] == 0
        # undeformed playback equals the ordinary render
        ref, _ = f.render(cam, "none")
        torch.testing.assert_close(frames[0].rgb, ref.rgb.detach(), rtol=0, atol=1e-12)

    def test_rigid_equivariance(self):
        f = random_field(1)
        cam = orbit_cameras(1, [0.5, 0.5, 0.5], 3.2, 48, 48)[0]
        R = Rotation.from_rotvec([0.3, -0.5, 0.8]).as_matrix()
        t = np.array([0.2, -0.1, 0.15])
        X = f.base_numpy("none")
        out, _ = Playback(f, "none").frame(X @ R.T + t, cam)
        # oracle: rest-pose Gaussians seen from the camera pulled back into the rest frame
        with torch.no_grad():
            g = f.gaussians(R.T @ (cam.origin - t), "none")
        direct = render(g.transformed(torch.as_tensor(R), torch.as_tensor(t)), cam)
        assert psnr(out.rgb, direct.rgb) > 50.0

    def test_leaf_volumes_follow_roots(self):
        f = random_field(2)
        rng = np.random.default_rng(5)
        X = f.base_numpy("none") + 0.03 * rng.normal(size=(f.mesh.n_vertices, 3))
        with torch.no_grad():
            P = f.points("none", torch.as_tensor(X)).numpy()
        roots = signed_volumes(X, f.forest.root_tets)
        for r in range(f.forest.n_nodes):
            if f.forest.depth(r) != 0:
                continue
            leaves = f.forest.subtree_leaves(r)
            v = signed_volumes(P, f.forest.node_corners[leaves]).sum()
            assert v == pytest.approx(roots[r], abs=1e-14)

    def test_inverted_frame_warns(self):
        f = random_field(3, degree=0)
        cam = orbit_cameras(1, [0.5, 0.5, 0.5], 3.0, 16, 16)[0]
        X = f.base_numpy("none").copy()
        X[13] = [0.5, 0.5, 3.0]   # centre vertex pulled far out
        with pytest.warns(UserWarning, match="inverted"):
            out, info = Playback(f, "none").frame(X, cam)
        assert info["inverted"] > 0 and torch.isfinite(out.rgb).all()


def test_simulate_config():
    mesh = build_uniform_grid(([0, 0, 0], [1, 1, 1]), (1, 1, 2))
    cfg = SimConfig.from_json(json.dumps({"pins": [0, 1], "frames": 4, "fps": 30, "compliance": 1e-5}))
    seq = simulate(mesh, mesh.vertices, cfg)
    assert len(seq) == 4
    np.testing.assert_array_equal(seq[-1][[0, 1]], mesh.vertices[[0, 1]])
    assert not np.array_equal(seq[-1], seq[0])
    with pytest.raises(ValueError):
        SimConfig.from_json('{"gravty": [0, 0, 1]}')
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        select_vertices(None, mesh.vertices)
