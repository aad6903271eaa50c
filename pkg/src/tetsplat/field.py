"""The learnable scene: base mesh, deformation map, subdivision forest and
per-leaf / per-point render attributes."""
from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .hierarchy import MAX_DEPTH, SubdivisionForest, collapse_to_level, constrain_barycentric
from .homeo import OrientationPreservingMap
from .reparam import Gaussians, activate_weights, sh_coeff_count, tet_to_gaussian
from .splat import Camera, RenderOutput, render
from .tetmesh import TetMesh

MODES = ("none", "sv_loss", "homeo", "homeo+quality", "frozen_vertices")
HOMEO_MODES = ("homeo", "homeo+quality")

INIT_WEIGHT = 0.1
INIT_OPACITY = 0.1


def inverse_sigmoid(p):
    return math.log(p / (1 - p))


def check_mode(mode: str) -> str:
    if mode not in MODES:
        raise ValueError("unknown constraint mode %r (expected one of %s)" % (mode, ", ".join(MODES)))
    return mode


def domain_box(vertices: np.ndarray, pad=0.1):
    lo, hi = vertices.min(0), vertices.max(0)
    ext = np.maximum(hi - lo, 1e-9)
    return lo - pad * ext, hi + pad * ext


class StructuredField(nn.Module):
    """Everything that is optimised, in float64.

    Per-node tensors (control, weights, opacity, rotation) have one row per
    forest node; only rows of leaves (or, for the control, of split nodes)
    are read.  SH coefficients have one row per point.
    """

    def __init__(self, mesh: TetMesh, sh_degree=3, max_depth=MAX_DEPTH, map_config: dict | None = None,
                 dtype=torch.float64):
        super().__init__()
        self.mesh = mesh
        self.sh_degree = sh_degree
        self.dtype = dtype
        self.forest = SubdivisionForest(mesh.tets, mesh.n_vertices, max_depth)
        cfg = dict(map_config or {})
        box = cfg.pop("domain_box", None)
        if box is None:
            box = domain_box(mesh.vertices)
        self.map = OrientationPreservingMap(box, dtype=dtype, **cfg)
        self.register_buffer("rest", torch.tensor(mesh.vertices, dtype=dtype))
        V, N = mesh.n_vertices, mesh.n_tets
        C = sh_coeff_count(sh_degree)
        self.vertex_offset = nn.Parameter(torch.zeros(V, 3, dtype=dtype))
        self.control_raw = nn.Parameter(torch.zeros(N, 4, dtype=dtype))
        self.weights_raw = nn.Parameter(torch.full((N, 4), INIT_WEIGHT, dtype=dtype))
        self.opacity_raw = nn.Parameter(torch.full((N,), inverse_sigmoid(INIT_OPACITY), dtype=dtype))
        self.rotation = nn.Parameter(torch.tensor([[1.0, 0, 0, 0]], dtype=dtype).repeat(N, 1))
        self.sh = nn.Parameter(torch.zeros(V, C, 3, dtype=dtype))
        self.masked = np.zeros(N, dtype=bool)

    # groups ---------------------------------------------------------------
    def node_params(self):
        return [self.control_raw, self.weights_raw, self.opacity_raw, self.rotation]

    def map_dense_parameters(self):
        tables = {id(t) for t in self.map.hash_parameters()}
        return [p for p in self.map.parameters() if id(p) not in tables]

    # geometry ----------------------------------------------------------------
    def base_positions(self, mode: str) -> torch.Tensor:
        check_mode(mode)
        if mode in HOMEO_MODES:
            return self.map.map_vertices(self.rest)
        return self.rest + self.vertex_offset

    def points(self, mode: str, base=None) -> torch.Tensor:
        X = self.base_positions(mode) if base is None else base
        return self.forest.resolve_points(X, self.control_raw)

    def visible_leaves(self) -> np.ndarray:
        leaves = self.forest.leaves
        return leaves[~self.masked[leaves]]

    # rendering -----------------------------------------------------------
    def gaussians(self, origin, mode: str, nodes=None, base=None, points=None, weights_raw=None,
                  opacity_raw=None, rotation=None, frame=None) -> Gaussians:
        """Gaussians of ``nodes`` (default: unmasked leaves).  Attribute
        overrides replace the per-node rows, e.g. for collapsed levels or
        playback rotations."""
        if nodes is None:
            nodes = self.visible_leaves()
        nodes = torch.as_tensor(np.asarray(nodes, dtype=np.int64))
        P = self.points(mode, base) if points is None else points
        tets = torch.from_numpy(self.forest.node_corners)[nodes]
        corners = P[tets]
        origin = torch.as_tensor(np.asarray(origin, dtype=np.float64), dtype=self.dtype)
        return tet_to_gaussian(
            corners,
            self.weights_raw[nodes] if weights_raw is None else weights_raw,
            self.rotation[nodes] if rotation is None else rotation,
            self.opacity_raw[nodes] if opacity_raw is None else opacity_raw,
            self.sh[tets], origin, self.sh_degree, frame)

    def render(self, cam: Camera, mode: str, background=(0.0, 0.0, 0.0), retain_screen_grad=False,
               **kw) -> tuple[RenderOutput, np.ndarray]:
        nodes = kw.pop("nodes", None)
        if nodes is None:
            nodes = self.visible_leaves()
        g = self.gaussians(cam.origin, mode, nodes=nodes, **kw)
        return render(g, cam, background, retain_screen_grad), np.asarray(nodes)

    @torch.no_grad()
    def render_level(self, cam: Camera, mode: str, level: int, background=(0.0, 0.0, 0.0)):
        nodes, op, rot, w = collapse_to_level(
            self.forest, level, self.opacity_raw.numpy(), self.rotation.numpy(), self.weights_raw.numpy(),
            alive=~self.masked)
        t = lambda a: torch.as_tensor(a, dtype=self.dtype)
        out, _ = self.render(cam, mode, background, nodes=nodes, weights_raw=t(w), opacity_raw=t(op),
                             rotation=t(rot))
        return out, nodes

    # structure edits -----------------------------------------------------
    @torch.no_grad()
    def split(self, nodes) -> list:
        """Subdivide leaves, growing every attribute tensor.  Children copy
        the parent's opacity and rotation; the new point's SH and the new
        corner's weight are barycentric blends of the parent corners.
        Returns the list of (node, children, point) actually split."""
        done = []
        grow = {"control": [], "weights": [], "opacity": [], "rotation": [], "sh": [], "masked": []}
        n_before = self.control_raw.shape[0]
        for n in nodes:
            n = int(n)
            if n >= n_before:
                continue  # created by this batch
            corners = self.forest.corners(n).copy()
            self.control_raw.data[n] = 0.0  # centroid
            res = self.forest.subdivide(n)
            if res is None:
                continue
            kids, c = res
            b = constrain_barycentric(self.control_raw.data[n])
            wp = self.weights_raw.data[n]
            for i in range(4):
                w = wp.clone()
                w[i] = (b * wp).sum()
                grow["weights"].append(w)
            grow["control"].append(torch.zeros(4, 4, dtype=self.dtype))
            grow["opacity"].append(self.opacity_raw.data[n].repeat(4))
            grow["rotation"].append(self.rotation.data[n].repeat(4, 1))
            grow["sh"].append((b[:, None, None] * self.sh.data[torch.from_numpy(corners)]).sum(0)[None])
            grow["masked"].append(np.zeros(4, dtype=bool))
            done.append((n, kids, c))
        if done:
            # fresh Parameter objects: resizing .data in place confuses autograd
            self._grow("control_raw", grow["control"])
            self._grow("weights_raw", [torch.stack(grow["weights"])])
            self._grow("opacity_raw", grow["opacity"])
            self._grow("rotation", grow["rotation"])
            self._grow("sh", grow["sh"])
            self.masked = np.concatenate([self.masked] + grow["masked"])
        return done

    def _grow(self, name, extra):
        old = getattr(self, name)
        setattr(self, name, nn.Parameter(torch.cat([old.detach()] + extra)))

    def check_consistency(self):
        N, P = self.forest.n_nodes, self.forest.n_points
        for t in self.node_params():
            assert t.shape[0] == N, (t.shape, N)
        assert self.sh.shape[0] == P and len(self.masked) == N

    # diagnostics -------------------------------------------------------
    @torch.no_grad()
    def base_numpy(self, mode: str) -> np.ndarray:
        return self.base_positions(mode).numpy().astype(np.float64)

    def summary(self) -> dict:
        return {"nodes": self.forest.n_nodes, "leaves": len(self.forest.leaves),
                "masked": int(self.masked[self.forest.leaves].sum()), "points": self.forest.n_points}

    def leaf_weights(self, nodes=None):
        nodes = self.visible_leaves() if nodes is None else nodes
        return activate_weights(self.weights_raw[torch.as_tensor(nodes)])
