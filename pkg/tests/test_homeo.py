import math

import numpy as np
import pytest
import torch

from tetsplat.homeo import (
    HASH_PRIMES,
    S_CLAMP,
    CouplingBlock,
    HashEncoding2D,
    OrientationPreservingMap,
    permutation_matrix,
)
from tetsplat.tetmesh import build_uniform_grid, count_inverted

SMALL_ENC = dict(n_levels=4, log2_table_size=12, base_resolution=4, max_resolution=64)


def constant_block(axis, s, t, encoding=None):
    blk = CouplingBlock(axis, encoding or SMALL_ENC)
    with torch.no_grad():
        blk.conditioner.l2.bias.copy_(torch.tensor([s, t], dtype=torch.float64))
    return blk


def random_map(seed, box=((0, 0, 0), (1, 1, 1)), encoding=None):
    g = torch.Generator().manual_seed(seed)
    return OrientationPreservingMap(box, encoding=encoding).randomize_(g)


class TestPermutation:
    def test_cyclic(self):
        P = permutation_matrix(1)
        np.testing.assert_array_equal(P @ np.array([1.0, 2.0, 3.0]), [3.0, 1.0, 2.0])

    @pytest.mark.parametrize("axis", [0, 1, 2])
    def test_even(self, axis):
        P = permutation_matrix(axis)
        assert np.linalg.det(P) == pytest.approx(1.0)
        # the transformed coordinate lands in the last slot
        e = np.zeros(3)
        e[axis] = 1
        assert (P @ e)[2] == 1


class TestHashEncoding:
    def test_output_and_levels(self):
        enc = HashEncoding2D()
        assert enc.out_dim == 16
        assert enc.resolutions[0] == 16 and enc.resolutions[-1] == 1024
        assert all(b > a for a, b in zip(enc.resolutions, enc.resolutions[1:]))

    def test_weights_sum_to_one(self):
        enc = HashEncoding2D(**SMALL_ENC)
        uv = torch.rand(500, 2, dtype=torch.float64)
        _, frac = enc.corners(uv)
        wx, wy = enc._weights(frac)
        torch.testing.assert_close((wx * wy).sum(-1), torch.ones(500, enc.n_levels, dtype=torch.float64))

    def test_hash_rows(self):
        enc = HashEncoding2D()
        T = 2**19
        # finest level is hashed: check one corner against a direct evaluation
        uv = torch.tensor([[0.3712, 0.8123]], dtype=torch.float64)
        idx, _ = enc.corners(uv)
        r = enc.resolutions[-1]
        ix, iy = int(math.floor(0.3712 * r)), int(math.floor(0.8123 * r))
        expect = ((ix * HASH_PRIMES[0]) ^ (iy * HASH_PRIMES[1])) % T
        assert int(idx[0, -1, 0]) - int(enc._offsets[-1]) == expect
        assert int(idx.max()) < enc.table.shape[0]

    def test_interpolates_corner_values(self):
        enc = HashEncoding2D(**SMALL_ENC)
        with torch.no_grad():
            enc.table.normal_()
        # at a lattice point the output equals that row
        uv = torch.tensor([[0.0, 0.0]], dtype=torch.float64)
        idx, frac = enc.corners(uv)
        torch.testing.assert_close(frac, torch.zeros_like(frac))
        feats = enc(uv).reshape(enc.n_levels, enc.n_features)
        torch.testing.assert_close(feats, enc.table[idx[0, :, 0]])

    def test_grad_matches_autograd(self):
        enc = HashEncoding2D(**SMALL_ENC)
        with torch.no_grad():
            enc.table.normal_()
        uv = torch.rand(20, 2, dtype=torch.float64) * 0.98 + 0.01
        _, hu, hv = enc.forward_and_grad(uv)
        for i in range(len(uv)):
            J = torch.autograd.functional.jacobian(lambda p: enc(p[None])[0], uv[i])
            torch.testing.assert_close(J[:, 0], hu[i])
            torch.testing.assert_close(J[:, 1], hv[i])


class TestBlock:
    def test_identity_at_init(self):
        blk = CouplingBlock(0)
        p = torch.rand(100, 3, dtype=torch.float64)
        torch.testing.assert_close(blk(p), p, rtol=0, atol=0)
        torch.testing.assert_close(blk.inverse(p), p, rtol=0, atol=0)

    def test_constant_scale_shift(self):
        blk = constant_block(1, math.log(2), 1.0)
        p = torch.tensor([[1.0, 2.0, 3.0]], dtype=torch.float64)
        torch.testing.assert_close(blk(p), torch.tensor([[1.0, 5.0, 3.0]], dtype=torch.float64))
        torch.testing.assert_close(blk.inverse(torch.tensor([[1.0, 5.0, 3.0]], dtype=torch.float64)), p)

    @pytest.mark.parametrize("axis", [0, 1, 2])
    def test_passthrough_and_det(self, axis):
        s = 0.37
        blk = constant_block(axis, s, -0.2)
        p = torch.rand(50, 3, dtype=torch.float64)
        out = blk(p)
        keep = [i for i in range(3) if i != axis]
        torch.testing.assert_close(out[:, keep], p[:, keep], rtol=0, atol=0)
        J = blk.jacobian(p)
        torch.testing.assert_close(torch.linalg.det(J), torch.full((50,), math.exp(s), dtype=torch.float64))

    def test_scale_clamped(self):
        blk = constant_block(2, 50.0, 0.0)
        p = torch.tensor([[0.1, 0.2, 1.0]], dtype=torch.float64)
        assert blk(p)[0, 2].item() == pytest.approx(math.exp(S_CLAMP))
        assert torch.isfinite(blk.jacobian(p)).all()

    def test_random_block_inverse(self):
        m = random_map(3, encoding=SMALL_ENC)
        blk = m.blocks[1]
        p = torch.rand(1000, 3, dtype=torch.float64)
        err = (blk.inverse(blk(p)) - p).abs().max().item()
        assert err < 1e-9

    def test_permuted_jacobian_lower_triangular(self):
        m = random_map(4, encoding=SMALL_ENC)
        p = torch.rand(200, 3, dtype=torch.float64)
        for blk in m.blocks:
            Jh = blk.jacobian_permuted(p)
            assert torch.all(torch.triu(Jh, 1) == 0)
            torch.testing.assert_close(Jh[:, 0, 0], torch.ones(200, dtype=torch.float64))
            torch.testing.assert_close(Jh[:, 1, 1], torch.ones(200, dtype=torch.float64))
            assert torch.all(Jh[:, 2, 2] > 0)


def naive_split(p, s_fn, t_fn):
    """Transform y conditioned on (x, z) without reordering the inputs."""
    x, y, z = p[0], p[1], p[2]
    c = torch.stack([x, z])
    return torch.stack([x, y * torch.exp(s_fn(c)) + t_fn(c), z])


def test_naive_split_is_not_triangular():
    s_fn = lambda c: 0.3 * torch.sin(3 * c[0]) + 0.2 * c[1] ** 2
    t_fn = lambda c: 0.5 * c[0] * c[1] + 0.1 * torch.cos(c[1])
    p = torch.tensor([0.4, 0.7, 0.9], dtype=torch.float64)
    J = torch.autograd.functional.jacobian(lambda q: naive_split(q, s_fn, t_fn), p)
    # rows index inputs, columns outputs
    Jt = J.T.numpy()
    assert Jt[0, 1] != 0 and Jt[2, 1] != 0
    assert not np.allclose(np.triu(Jt, 1), 0)
    assert not np.allclose(np.tril(Jt, -1), 0)


@torch.no_grad()
def same_cells(m, a, b):
    """True where every block reads identical hash rows at a and b."""
    ua, ub = m.normalize(a), m.normalize(b)
    same = torch.ones(len(a), dtype=torch.bool)
    for blk in m.blocks:
        enc = blk.conditioner.encoding
        ia, _ = enc.corners(ua[:, blk.order[:2]])
        ib, _ = enc.corners(ub[:, blk.order[:2]])
        same &= (ia == ib).flatten(1).all(1)
        ua, ub = blk(ua), blk(ub)
    return same


class TestMap:
    def test_identity_at_init(self):
        m = OrientationPreservingMap(([-1, 0, 2], [1, 3, 5]), encoding=SMALL_ENC)
        x = torch.rand(100, 3, dtype=torch.float64) * 2
        torch.testing.assert_close(m(x), x)
        J = m.jacobian(x)
        torch.testing.assert_close(J, torch.eye(3, dtype=torch.float64).expand(100, 3, 3))

    def test_translation_only(self):
        box = ([0, 0, 0], [2, 2, 2])
        m = OrientationPreservingMap(box, encoding=SMALL_ENC)
        with torch.no_grad():
            for blk in m.blocks:
                blk.conditioner.l2.bias.copy_(torch.tensor([0.0, 0.05], dtype=torch.float64))
        mesh = build_uniform_grid(box, (2, 2, 2))
        V = torch.tensor(mesh.vertices)
        out = m.map_vertices(V)
        # normalized shift 0.05 on each axis, scaled by the extent 2
        torch.testing.assert_close(out - V, torch.full_like(V, 0.1))
        np.testing.assert_array_equal(V.numpy(), mesh.vertices)

    def test_bijective(self):
        m = random_map(11)
        x = torch.rand(100_000, 3, dtype=torch.float64)
        with torch.no_grad():
            err = (m.inverse(m(x)) - x).abs().max().item()
        assert err < 1e-8

    def test_det_positive_scene_box(self):
        m = random_map(5, box=((-2, 0, 1), (1, 0.5, 4)), encoding=SMALL_ENC)
        lo, hi = m.lo, m.hi
        x = lo + torch.rand(20_000, 3, dtype=torch.float64) * (hi - lo)
        J = m.jacobian(x)
        det = torch.linalg.det(J)
        assert torch.all(det > 0)
        torch.testing.assert_close(torch.log(det), m.log_det(x))

    def test_jacobian_matches_autograd(self):
        m = random_map(6, box=((0, 0, 0), (2, 1, 3)))
        x = torch.rand(8, 3, dtype=torch.float64) * torch.tensor([2.0, 1.0, 3.0], dtype=torch.float64)
        J = m.jacobian(x)
        for i in range(len(x)):
            Ja = torch.autograd.functional.jacobian(lambda p: m(p[None])[0], x[i])
            torch.testing.assert_close(J[i], Ja, rtol=1e-10, atol=1e-10)

    def test_jacobian_finite_differences(self):
        m = random_map(7)
        g = torch.Generator().manual_seed(0)
        x = torch.rand(2000, 3, dtype=torch.float64, generator=g) * 0.98 + 0.01
        J = m.jacobian(x)
        h = 1e-7
        with torch.no_grad():
            fwd = torch.stack([m(x + h * e) for e in torch.eye(3, dtype=torch.float64)], -1)
            bwd = torch.stack([m(x - h * e) for e in torch.eye(3, dtype=torch.float64)], -1)
        scale = J.flatten(1).norm(dim=1)
        # points whose stencil crosses a hash-cell seam have no classical derivative
        smooth = torch.ones(len(x), dtype=torch.bool)
        for e in torch.eye(3, dtype=torch.float64):
            smooth &= same_cells(m, x + h * e, x - h * e)
        assert smooth.float().mean() > 0.95
        central = (fwd - bwd) / (2 * h)
        rel = (central - J).flatten(1).norm(dim=1) / scale
        assert rel[smooth].max() < 1e-4

    def test_parameter_gradient(self):
        m = random_map(8, encoding=SMALL_ENC)
        x = torch.rand(64, 3, dtype=torch.float64)
        w = torch.randn(64, 3, dtype=torch.float64)
        loss_fn = lambda: (m(x) * w).sum()
        m.zero_grad()
        loss_fn().backward()
        g = torch.Generator().manual_seed(1)
        h = 1e-5  # parameters do not move seams; larger step keeps roundoff below 1e-9
        for name, p in m.named_parameters():
            flat = p.data.view(-1)
            if "table" in name:
                assert p.grad.is_sparse
            grad = (p.grad.to_dense() if p.grad.is_sparse else p.grad).reshape(-1)
            if "table" in name:
                # only rows touched by x carry gradient
                cand = torch.nonzero(grad).flatten()
            else:
                cand = torch.arange(flat.numel())
            pick = cand[torch.randperm(len(cand), generator=g)[:6]]
            fd = []
            for i in pick:
                old = flat[i].item()
                flat[i] = old + h
                lp = loss_fn().item()
                flat[i] = old - h
                lm = loss_fn().item()
                flat[i] = old
                fd.append((lp - lm) / (2 * h))
            fd = torch.tensor(fd, dtype=torch.float64)
            rel = (fd - grad[pick]).norm() / fd.norm().clamp_min(1e-12)
            assert rel < 1e-6, name

    def test_mapped_grid_orientation(self):
        box = ([0, 0, 0], [1, 1, 1])
        m = random_map(9, encoding=SMALL_ENC)
        mesh = build_uniform_grid(box, (4, 4, 4))
        with torch.no_grad():
            out = m.map_vertices(torch.tensor(mesh.vertices)).numpy()
        assert np.isfinite(out).all()
        # a mild map leaves this coarse grid uninverted; not guaranteed in general
        assert count_inverted(out, mesh.tets) == 0

    def test_clamps_outside(self, caplog):
        m = OrientationPreservingMap(([0, 0, 0], [1, 1, 1]), encoding=SMALL_ENC)
        with caplog.at_level("WARNING"):
            out = m.map_vertices(torch.tensor([[1.5, 0.5, 0.5]], dtype=torch.float64))
        assert out[0, 0].item() == 1.0
        assert "outside" in caplog.text
