"""Orientation-preserving invertible map built from permuted affine coupling
blocks.

Each block transforms one coordinate by ``y' = y * exp(s(u, v)) + t(u, v)``
where ``(u, v)`` are the two untouched coordinates.  The block input is first
reordered by an even permutation so the pass-through pair is contiguous,
which keeps the block Jacobian triangular with a positive diagonal in the
permuted frame.  Conditioners are a 2D multiresolution hash encoding
followed by a small MLP.
"""

from __future__ import annotations

import logging
import math

import numba
import numpy as np
import torch
from torch import nn

log = logging.getLogger(__name__)

HASH_PRIMES = (1, 2654435761)
S_CLAMP = 10.0

# permuted = p[..., ORDER[axis]]; the last slot is the transformed coordinate
ORDER = {
    0: (1, 2, 0),  # P [x,y,z] = [y,z,x]
    1: (2, 0, 1),  # P [x,y,z] = [z,x,y]
    2: (0, 1, 2),
}


@numba.njit(cache=True)
def _silu_and_slope(z, sg):
    """Given ``sg = sigmoid(z)``, in place ``z <- silu(z)`` and
    ``sg <- silu'(z)``.  The exp stays in torch, which vectorises it."""
    for i in range(z.shape[0]):
        for j in range(z.shape[1]):
            v = z[i, j]
            s = sg[i, j]
            z[i, j] = v * s
            sg[i, j] = s * (1.0 + v * (1.0 - s))


@numba.njit(cache=True, fastmath=False)
def _encode_with_tangents(uv, table, res, offsets, dense, mask, out):
    """Hash-encoded features and their u/v derivatives, stacked into
    ``out`` (3n, L*F) as [value; d/du; d/dv]."""
    n = uv.shape[0]
    F = table.shape[1]
    for i in range(n):
        u, v = uv[i, 0], uv[i, 1]
        in_u = 1.0 if 0.0 <= u <= 1.0 else 0.0
        in_v = 1.0 if 0.0 <= v <= 1.0 else 0.0
        u = min(max(u, 0.0), 1.0)
        v = min(max(v, 0.0), 1.0)
        for l in range(res.shape[0]):
            r = res[l]
            px, py = u * r, v * r
            x0 = min(np.floor(px), r - 1.0)
            y0 = min(np.floor(py), r - 1.0)
            fx, fy = px - x0, py - y0
            ix0, iy0 = np.int64(x0), np.int64(y0)
            for k in range(4):
                dx, dy = k & 1, k >> 1
                ix, iy = ix0 + dx, iy0 + dy
                if dense[l]:
                    row = iy * (np.int64(r) + 1) + ix
                else:
                    row = ((ix * HASH_PRIMES[0]) ^ (iy * HASH_PRIMES[1])) & mask
                row += offsets[l]
                wx = fx if dx else 1.0 - fx
                wy = fy if dy else 1.0 - fy
                gx = (1.0 if dx else -1.0) * wy * r * in_u
                gy = wx * (1.0 if dy else -1.0) * r * in_v
                for f in range(F):
                    t = table[row, f]
                    c = l * F + f
                    out[i, c] += wx * wy * t
                    out[n + i, c] += gx * t
                    out[2 * n + i, c] += gy * t


def permutation_matrix(axis: int) -> np.ndarray:
    P = np.zeros((3, 3))
    for i, j in enumerate(ORDER[axis]):
        P[i, j] = 1.0
    return P


class HashEncoding2D(nn.Module):
    """Multiresolution hash encoding of points in [0, 1]^2.

    Coarse levels whose grid fits in the table are indexed densely; finer
    levels use the XOR-prime spatial hash.  All levels live in a single
    parameter tensor so the optimiser can update touched rows only.
    """

    def __init__(self, n_levels=8, log2_table_size=19, base_resolution=16,
                 max_resolution=1024, n_features=2, dtype=torch.float64):
        super().__init__()
        self.n_levels = n_levels
        self.log2_table_size = log2_table_size
        self.base_resolution = base_resolution
        self.max_resolution = max_resolution
        self.n_features = n_features
        T = 2**log2_table_size
        if n_levels > 1:
            growth = math.exp((math.log(max_resolution) - math.log(base_resolution)) / (n_levels - 1))
        else:
            growth = 1.0
        self.resolutions = [int(math.floor(base_resolution * growth**l + 1e-6)) for l in range(n_levels)]
        sizes = [min(T, (r + 1) ** 2) for r in self.resolutions]
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.register_buffer("_res", torch.tensor(self.resolutions, dtype=dtype), persistent=False)
        self.register_buffer("_res_i", torch.tensor(self.resolutions), persistent=False)
        self.register_buffer("_offsets", torch.tensor(offsets[:-1]), persistent=False)
        self.register_buffer("_dense", torch.tensor([(r + 1) ** 2 <= T for r in self.resolutions]),
                             persistent=False)
        self.register_buffer("_dx", torch.tensor([0, 1, 0, 1]), persistent=False)
        self.register_buffer("_dy", torch.tensor([0, 0, 1, 1]), persistent=False)
        self.table = nn.Parameter(torch.empty(int(offsets[-1]), n_features, dtype=dtype).uniform_(-1e-4, 1e-4))

    @property
    def out_dim(self) -> int:
        return self.n_levels * self.n_features

    def corners(self, uv: torch.Tensor):
        """Table rows (n, L, 4) and bilinear fractions (n, L, 2) of every level."""
        T = 2**self.log2_table_size
        pos = uv.clamp(0.0, 1.0)[:, None, :] * self._res[None, :, None]
        i0 = torch.minimum(torch.floor(pos.detach()), (self._res - 1)[None, :, None])
        frac = pos - i0
        i0 = i0.long()
        ix = i0[..., 0:1] + self._dx
        iy = i0[..., 1:2] + self._dy
        dense = iy * (self._res_i + 1)[None, :, None] + ix
        hashed = ((ix * HASH_PRIMES[0]) ^ (iy * HASH_PRIMES[1])) & (T - 1)
        idx = torch.where(self._dense[None, :, None], dense, hashed) + self._offsets[None, :, None]
        return idx, frac

    def _weights(self, frac):
        fx, fy = frac[..., 0:1], frac[..., 1:2]
        wx = torch.where(self._dx.bool(), fx, 1 - fx)
        wy = torch.where(self._dy.bool(), fy, 1 - fy)
        return wx, wy

    def forward(self, uv: torch.Tensor) -> torch.Tensor:
        idx, frac = self.corners(uv)
        wx, wy = self._weights(frac)
        # embedding lookups give a sparse gradient: only touched rows
        rows = nn.functional.embedding(idx, self.table, sparse=True)
        feats = (rows * (wx * wy)[..., None]).sum(2)
        return feats.reshape(len(uv), -1)

    @torch.no_grad()
    def forward_and_grad(self, uv: torch.Tensor):
        """Features and their derivatives w.r.t. u and v, each (n, L*F)."""
        n = len(uv)
        idx, frac = self.corners(uv)
        wx, wy = self._weights(frac)
        sx = (2 * self._dx - 1).to(uv.dtype)
        sy = (2 * self._dy - 1).to(uv.dtype)
        inside = ((uv >= 0) & (uv <= 1)).to(uv.dtype)
        r = self._res[None, :, None]
        W = torch.stack([wx * wy, sx * wy * r * inside[:, None, 0:1], wx * sy * r * inside[:, None, 1:2]], -1)
        out = torch.einsum("nlkf,nlkj->jnlf", self.table[idx], W)
        return out[0].reshape(n, -1), out[1].reshape(n, -1), out[2].reshape(n, -1)

    @torch.no_grad()
    def stacked_with_grad(self, uv: torch.Tensor) -> torch.Tensor:
        """``cat(forward_and_grad(uv))`` from a single fused pass."""
        out = torch.zeros(3 * len(uv), self.out_dim, dtype=self.table.dtype)
        _encode_with_tangents(uv.detach().contiguous().numpy(), self.table.detach().numpy(),
                              self._res.numpy(), self._offsets.numpy(), self._dense.numpy(),
                              2**self.log2_table_size - 1, out.numpy())
        return out


class Conditioner(nn.Module):
    """(u, v) -> (raw scale, translation)."""

    def __init__(self, encoding: dict | None = None, hidden=128, dtype=torch.float64):
        super().__init__()
        self.encoding = HashEncoding2D(dtype=dtype, **(encoding or {}))
        d = self.encoding.out_dim
        self.l0 = nn.Linear(d, hidden, dtype=dtype)
        self.l1 = nn.Linear(hidden, hidden, dtype=dtype)
        self.l2 = nn.Linear(hidden, 2, dtype=dtype)
        # zero output layer: the block starts as the identity
        nn.init.zeros_(self.l2.weight)
        nn.init.zeros_(self.l2.bias)

    def forward(self, uv):
        h = self.encoding(uv)
        h = nn.functional.silu(self.l0(h))
        h = nn.functional.silu(self.l1(h))
        out = self.l2(h)
        return out[:, 0], out[:, 1]

    @torch.no_grad()
    def forward_and_pullback(self, uv):
        """``s_raw, t`` plus a pullback taking cotangents ``(cs, ct)`` to the
        (n, 2) gradient w.r.t. ``uv``.  One reverse pass per scalar output is
        cheaper than carrying two tangents forward."""
        n = len(uv)
        e = self.encoding.stacked_with_grad(uv)
        x, slopes = e[:n], []
        for lin in (self.l0, self.l1):
            x = x @ lin.weight.T.contiguous() + lin.bias
            slope = torch.sigmoid(x)
            _silu_and_slope(x.numpy(), slope.numpy())
            slopes.append(slope)
        out = x @ self.l2.weight.T.contiguous() + self.l2.bias

        def pullback(cs, ct):
            g = torch.stack([cs, ct], 1) @ self.l2.weight
            g = (g * slopes[1]) @ self.l1.weight
            g = (g * slopes[0]) @ self.l0.weight
            return torch.stack([(g * e[n:2 * n]).sum(1), (g * e[2 * n:]).sum(1)], 1)

        return out[:, 0], out[:, 1], pullback


class CouplingBlock(nn.Module):
    def __init__(self, axis: int, encoding: dict | None = None, hidden=128, dtype=torch.float64):
        super().__init__()
        if axis not in ORDER:
            raise ValueError("axis must be 0, 1 or 2")
        self.axis = axis
        self.order = list(ORDER[axis])
        self.inv_order = [self.order.index(i) for i in range(3)]
        self.conditioner = Conditioner(encoding, hidden, dtype)

    def _scale_shift(self, q):
        s_raw, t = self.conditioner(q[:, :2])
        return torch.clamp(s_raw, -S_CLAMP, S_CLAMP), t

    def forward(self, p: torch.Tensor) -> torch.Tensor:
        q = p[:, self.order]
        s, t = self._scale_shift(q)
        y = q[:, 2] * torch.exp(s) + t
        return torch.cat([q[:, :2], y[:, None]], 1)[:, self.inv_order]

    def inverse(self, p: torch.Tensor) -> torch.Tensor:
        q = p[:, self.order]
        s, t = self._scale_shift(q)
        y = (q[:, 2] - t) * torch.exp(-s)
        return torch.cat([q[:, :2], y[:, None]], 1)[:, self.inv_order]

    @torch.no_grad()
    def forward_and_jacobian_permuted(self, p: torch.Tensor):
        """Block output and its Jacobian in the permuted frame, which is lower
        triangular with diagonal (1, 1, exp(s))."""
        q = p[:, self.order]
        s_raw, t, pullback = self.conditioner.forward_and_pullback(q[:, :2])
        s = torch.clamp(s_raw, -S_CLAMP, S_CLAMP)
        es = torch.exp(s)
        y = q[:, 2]
        # one-sided derivative at the clamp: s is constant outside
        inside = ((s_raw > -S_CLAMP) & (s_raw < S_CLAMP)).to(q.dtype)
        J = torch.zeros(len(q), 3, 3, dtype=q.dtype)
        J[:, 0, 0] = 1.0
        J[:, 1, 1] = 1.0
        # the only non-trivial row is the gradient of y * exp(s) + t
        J[:, 2, :2] = pullback(y * es * inside, torch.ones_like(y))
        J[:, 2, 2] = es
        out = torch.cat([q[:, :2], (y * es + t)[:, None]], 1)[:, self.inv_order]
        return out, J

    def jacobian_permuted(self, p: torch.Tensor) -> torch.Tensor:
        return self.forward_and_jacobian_permuted(p)[1]

    def forward_and_jacobian(self, p: torch.Tensor):
        out, Jh = self.forward_and_jacobian_permuted(p)
        # P^T Jh P as an index permutation
        inv = self.inv_order
        return out, Jh[:, inv][:, :, inv]

    def jacobian(self, p: torch.Tensor) -> torch.Tensor:
        return self.forward_and_jacobian(p)[1]


class OrientationPreservingMap(nn.Module):
    """Composite of coupling blocks acting on coordinates normalised to the
    unit cube of ``domain_box``."""

    def __init__(self, domain_box, n_blocks=3, encoding: dict | None = None, hidden=128,
                 dtype=torch.float64):
        super().__init__()
        lo, hi = (torch.as_tensor(np.asarray(b, dtype=np.float64), dtype=dtype) for b in domain_box)
        if torch.any(hi <= lo):
            raise ValueError("domain box must have positive extent")
        self.register_buffer("lo", lo)
        self.register_buffer("hi", hi)
        self.encoding_config = dict(encoding or {})
        self.hidden = hidden
        self.blocks = nn.ModuleList(
            CouplingBlock(b % 3, encoding, hidden, dtype) for b in range(n_blocks)
        )

    @property
    def extent(self):
        return self.hi - self.lo

    def config(self) -> dict:
        return {
            "domain_box": [self.lo.tolist(), self.hi.tolist()],
            "n_blocks": len(self.blocks),
            "encoding": self.encoding_config,
            "hidden": self.hidden,
        }

    def normalize(self, x):
        return (x - self.lo) / self.extent

    def denormalize(self, u):
        return self.lo + u * self.extent

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        u = self.normalize(x)
        for blk in self.blocks:
            u = blk(u)
        return self.denormalize(u)

    def inverse(self, x: torch.Tensor) -> torch.Tensor:
        u = self.normalize(x)
        for blk in reversed(self.blocks):
            u = blk.inverse(u)
        return self.denormalize(u)

    @torch.no_grad()
    def jacobian(self, x: torch.Tensor, chunk=4096) -> torch.Tensor:
        """Per-point 3x3 Jacobian in scene coordinates."""
        out = []
        ext = self.extent
        for start in range(0, len(x), chunk):
            u = self.normalize(x[start:start + chunk])
            J = torch.eye(3, dtype=x.dtype).expand(len(u), 3, 3)
            for blk in self.blocks:
                u, Jb = blk.forward_and_jacobian(u)
                J = Jb @ J
            # D J D^-1 with D = diag(extent)
            out.append(J * ext[None, :, None] / ext[None, None, :])
        return torch.cat(out) if out else torch.zeros(0, 3, 3, dtype=x.dtype)

    @torch.no_grad()
    def log_det(self, x: torch.Tensor) -> torch.Tensor:
        """Sum of per-block log scales (the structural log-determinant)."""
        u = self.normalize(x)
        total = torch.zeros(len(u), dtype=x.dtype)
        for blk in self.blocks:
            s, _ = blk._scale_shift(u[:, blk.order])
            total = total + s
            u = blk(u)
        return total

    def map_vertices(self, base: torch.Tensor) -> torch.Tensor:
        inside = torch.all((base >= self.lo) & (base <= self.hi), dim=1)
        if not bool(inside.all()):
            log.warning("%d vertices outside the map domain were clamped", int((~inside).sum()))
            base = torch.maximum(torch.minimum(base, self.hi), self.lo)
        return self(base)

    def hash_parameters(self):
        return [blk.conditioner.encoding.table for blk in self.blocks]

    @torch.no_grad()
    def randomize_(self, generator: torch.Generator, table_scale=0.05, out_scale=0.1):
        """Random non-identity parameters, used to probe the structural
        guarantees on maps far from the identity."""
        for blk in self.blocks:
            c = blk.conditioner
            c.encoding.table.uniform_(-table_scale, table_scale, generator=generator)
            for lin in (c.l0, c.l1):
                bound = 1.0 / math.sqrt(lin.in_features)
                lin.weight.uniform_(-bound, bound, generator=generator)
                lin.bias.uniform_(-bound, bound, generator=generator)
            c.l2.weight.normal_(0.0, out_scale, generator=generator)
            c.l2.bias.normal_(0.0, out_scale, generator=generator)
        return self
