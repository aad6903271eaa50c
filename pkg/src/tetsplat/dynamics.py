"""Mass-spring XPBD on base-mesh edges, trilinear lattice deformation, and
playback of a trained field on moving base vertices."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field as dc_field

import numba
import numpy as np
import torch

from .field import StructuredField
from .reparam import matrix_to_quaternion, quaternion_multiply, tet_to_gaussian
from .splat import Camera, RenderOutput, render
from .tetmesh import TetMesh, count_inverted, signed_volumes


# ---------------------------------------------------------------------------
# XPBD


@dataclass
class MassSpringSystem:
    x: np.ndarray            # (n, 3)
    v: np.ndarray            # (n, 3)
    inv_mass: np.ndarray     # (n,), 0 for pinned particles
    springs: np.ndarray      # (m, 2) int
    rest: np.ndarray         # (m,)
    compliance: np.ndarray   # (m,)
    gravity: np.ndarray = dc_field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))

    def __post_init__(self):
        self.x = np.array(self.x, dtype=np.float64)
        self.v = np.array(self.v, dtype=np.float64)
        self.inv_mass = np.array(self.inv_mass, dtype=np.float64)
        self.springs = np.array(self.springs, dtype=np.int64).reshape(-1, 2)
        self.rest = np.array(self.rest, dtype=np.float64)
        self.compliance = np.broadcast_to(np.asarray(self.compliance, dtype=np.float64), self.rest.shape).copy()
        self.gravity = np.array(self.gravity, dtype=np.float64)
        if np.any(self.rest <= 0):
            raise ValueError("spring rest lengths must be positive")
        if np.any(self.compliance < 0):
            raise ValueError("compliance must be >= 0")

    @property
    def n_particles(self) -> int:
        return len(self.x)

    def masses(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.where(self.inv_mass > 0, 1.0 / self.inv_mass, np.inf)

    def pin(self, indices):
        self.inv_mass[np.asarray(indices, dtype=np.int64)] = 0.0
        self.v[np.asarray(indices, dtype=np.int64)] = 0.0

    def momentum(self) -> np.ndarray:
        free = self.inv_mass > 0
        return (self.v[free] / self.inv_mass[free, None]).sum(0)


def build_springs(mesh: TetMesh, density=1.0, compliance=0.0, positions=None, gravity=(0.0, 0.0, -9.81)):
    """One particle per vertex with a quarter of each incident tet's mass, one
    spring per unique edge at its current length."""
    x = mesh.vertices if positions is None else np.asarray(positions, dtype=np.float64)
    vols = np.abs(signed_volumes(x, mesh.tets))
    mass = np.zeros(len(x))
    np.add.at(mass, mesh.tets.ravel(), np.repeat(density * vols / 4.0, 4))
    edges = mesh.edges()
    rest = np.linalg.norm(x[edges[:, 0]] - x[edges[:, 1]], axis=1)
    with np.errstate(divide="ignore"):
        inv = np.where(mass > 0, 1.0 / mass, 0.0)
    return MassSpringSystem(x.copy(), np.zeros_like(x), inv, edges, rest, compliance, np.asarray(gravity))


@numba.njit(cache=True)
def _solve_distance(p, w, springs, rest, alpha, iterations):
    lam = np.zeros(len(springs))
    for _ in range(iterations):
        for k in range(len(springs)):
            i, j = springs[k, 0], springs[k, 1]
            ws = w[i] + w[j]
            if ws == 0.0:
                continue
            dx = p[i, 0] - p[j, 0]
            dy = p[i, 1] - p[j, 1]
            dz = p[i, 2] - p[j, 2]
            d = np.sqrt(dx * dx + dy * dy + dz * dz)
            if d < 1e-300:
                continue
            c = d - rest[k]
            dl = (-c - alpha[k] * lam[k]) / (ws + alpha[k])
            lam[k] += dl
            s = dl / d
            p[i, 0] += w[i] * s * dx
            p[i, 1] += w[i] * s * dy
            p[i, 2] += w[i] * s * dz
            p[j, 0] -= w[j] * s * dx
            p[j, 1] -= w[j] * s * dy
            p[j, 2] -= w[j] * s * dz


def xpbd_step(system: MassSpringSystem, dt: float, iterations=10, substeps=1) -> MassSpringSystem:
    """Advance in place by ``dt`` and return the system."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    h = dt / substeps
    free = (system.inv_mass > 0)[:, None]
    alpha = system.compliance / (h * h)
    for _ in range(substeps):
        system.v = np.where(free, system.v + system.gravity * h, 0.0)
        p = system.x + system.v * h
        _solve_distance(p, system.inv_mass, system.springs, system.rest, alpha, iterations)
        system.v = np.where(free, (p - system.x) / h, 0.0)
        system.x = np.where(free, p, system.x)
    return system


# ---------------------------------------------------------------------------
# lattice


class LatticeDeformer:
    """Trilinear free-form deformation over an (nx, ny, nz) control grid."""

    def __init__(self, box, shape, rest_positions):
        lo, hi = (np.asarray(b, dtype=np.float64) for b in box)
        self.shape = tuple(int(s) for s in shape)
        if len(self.shape) != 3 or min(self.shape) < 2:
            raise ValueError("lattice needs at least 2 control points per axis")
        if np.any(hi <= lo):
            raise ValueError("degenerate lattice box")
        self.lo, self.hi = lo, hi
        rest = np.asarray(rest_positions, dtype=np.float64)
        cells = np.array(self.shape) - 1
        u = (rest - lo) / (hi - lo) * cells
        self.outside = np.any((u < -1e-12) | (u > cells + 1e-12), axis=1)
        u = np.clip(u, 0, cells)
        self.cell = np.minimum(np.floor(u).astype(np.int64), cells - 1)
        self.frac = u - self.cell

    @property
    def n_outside(self) -> int:
        return int(self.outside.sum())

    def weights(self):
        """(n, 8) trilinear weights and (n, 8) flat control indices."""
        nx, ny, nz = self.shape
        W, I = [], []
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    f = self.frac
                    W.append((f[:, 0] if dx else 1 - f[:, 0]) * (f[:, 1] if dy else 1 - f[:, 1])
                             * (f[:, 2] if dz else 1 - f[:, 2]))
                    c = self.cell + [dx, dy, dz]
                    I.append((c[:, 0] * ny + c[:, 1]) * nz + c[:, 2])
        return np.stack(W, 1), np.stack(I, 1)

    def displacement(self, control_disp) -> np.ndarray:
        d = np.asarray(control_disp, dtype=np.float64).reshape(-1, 3)
        if len(d) != np.prod(self.shape):
            raise ValueError("expected %d control displacements" % np.prod(self.shape))
        W, I = self.weights()
        return (W[..., None] * d[I]).sum(1)


def apply_lattice(deformer: LatticeDeformer, control_disp, rest_positions) -> np.ndarray:
    if deformer.n_outside:
        warnings.warn("%d vertices outside the lattice box; using clamped cells" % deformer.n_outside)
    return np.asarray(rest_positions, dtype=np.float64) + deformer.displacement(control_disp)


# ---------------------------------------------------------------------------
# playback


def polar_rotations(rest_corners: np.ndarray, corners: np.ndarray) -> np.ndarray:
    """Rotational factor of each tet's deformation gradient, (n, 3, 3).
    Inverted elements get the nearest proper rotation."""
    Dm = np.swapaxes(rest_corners[:, 1:] - rest_corners[:, :1], 1, 2)
    Ds = np.swapaxes(corners[:, 1:] - corners[:, :1], 1, 2)
    Fg = Ds @ np.linalg.inv(Dm)
    U, _, Vt = np.linalg.svd(Fg)
    flip = np.linalg.det(U @ Vt) < 0
    U[flip, :, 2] *= -1
    return U @ Vt


def _conj(q):
    return q * np.array([1.0, -1.0, -1.0, -1.0])


class Playback:
    """Renders a trained field whose base vertices follow an external motion.
    All learned attributes stay frozen; each leaf's Gaussian rotation and SH
    frame follow the rotation of its tet."""

    def __init__(self, fld: StructuredField, mode: str):
        self.field = fld
        self.mode = mode
        self.nodes = fld.visible_leaves()
        with torch.no_grad():
            self.rest_base = fld.base_numpy(mode)
            self.rest_points = fld.points(mode).numpy()
        self.tets = fld.forest.node_corners[self.nodes]
        self.rest_corners = self.rest_points[self.tets]
        self.root_tets = fld.forest.root_tets

    @torch.no_grad()
    def gaussians(self, base_positions, origin):
        f = self.field
        base = torch.as_tensor(np.asarray(base_positions, dtype=np.float64), dtype=f.dtype)
        pts = f.forest.resolve_points(base, f.control_raw)
        corners = pts[torch.from_numpy(self.tets)]
        R = polar_rotations(self.rest_corners, corners.numpy())
        qR = matrix_to_quaternion(R)
        idx = torch.from_numpy(self.nodes)
        q = f.rotation[idx].numpy()
        q = q / np.linalg.norm(q, axis=1, keepdims=True)
        q2 = quaternion_multiply(quaternion_multiply(qR, q), _conj(qR))
        origin = torch.as_tensor(np.asarray(origin, dtype=np.float64), dtype=f.dtype)
        return tet_to_gaussian(corners, f.weights_raw[idx], torch.as_tensor(q2, dtype=f.dtype),
                               f.opacity_raw[idx], f.sh[torch.from_numpy(self.tets)], origin, f.sh_degree,
                               frame=torch.as_tensor(R, dtype=f.dtype))

    def frame(self, base_positions, cam: Camera, background=(0.0, 0.0, 0.0)) -> tuple[RenderOutput, dict]:
        inv = count_inverted(np.asarray(base_positions, dtype=np.float64), self.root_tets)
        if inv:
            warnings.warn("%d inverted base tets in this frame" % inv)
        with torch.no_grad():
            out = render(self.gaussians(base_positions, cam.origin), cam, background)
        return out, {"inverted": inv}


def playback(fld: StructuredField, mode: str, sequence, cameras, background=(0.0, 0.0, 0.0)):
    """Render one frame per base-position array; ``cameras`` is one camera or
    a list matching ``sequence``."""
    pb = Playback(fld, mode)
    if isinstance(cameras, Camera):
        cameras = [cameras] * len(sequence)
    frames, info = [], []
    for X, cam in zip(sequence, cameras):
        out, d = pb.frame(X, cam, background)
        frames.append(out)
        info.append(d)
    return frames, info


# ---------------------------------------------------------------------------
# configs


def select_vertices(spec, positions: np.ndarray) -> np.ndarray:
    """Vertex indices from a list or a ``{"box": [lo, hi]}`` selector."""
    if spec is None:
        return np.zeros(0, dtype=np.int64)
    if isinstance(spec, dict):
        lo, hi = (np.asarray(b, dtype=np.float64) for b in spec["box"])
        return np.nonzero(np.all((positions >= lo) & (positions <= hi), axis=1))[0]
    idx = np.asarray(spec, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= len(positions)):
        raise ValueError("pinned vertex index out of range")
    return idx


@dataclass
class SimConfig:
    pins: object = None
    gravity: tuple = (0.0, 0.0, -9.81)
    compliance: float = 0.0
    density: float = 1.0
    frames: int = 60
    fps: float = 60.0
    substeps: int = 10
    iterations: int = 10
    initial_velocity: tuple = (0.0, 0.0, 0.0)

    @classmethod
    def from_json(cls, text: str) -> "SimConfig":
        d = json.loads(text)
        unknown = set(d) - set(cls.__dataclass_fields__) - {"camera", "lattice"}
        if unknown:
            raise ValueError("unknown simulation keys: %s" % ", ".join(sorted(unknown)))
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def simulate(mesh: TetMesh, positions: np.ndarray, cfg: SimConfig) -> list:
    """Base-vertex positions per frame (frame 0 is the input)."""
    sys_ = build_springs(mesh, cfg.density, cfg.compliance, positions, cfg.gravity)
    sys_.v[:] = np.asarray(cfg.initial_velocity, dtype=np.float64)
    sys_.pin(select_vertices(cfg.pins, sys_.x))
    out = [sys_.x.copy()]
    for _ in range(cfg.frames - 1):
        xpbd_step(sys_, 1.0 / cfg.fps, cfg.iterations, cfg.substeps)
        out.append(sys_.x.copy())
    return out


@dataclass
class LatticeConfig:
    shape: tuple = (2, 2, 2)
    box: list | None = None
    frames: int = 30
    keyframes: list = dc_field(default_factory=list)   # [{"frame": k, "displacements": [[dx,dy,dz], ...]}]

    @classmethod
    def from_json(cls, text: str) -> "LatticeConfig":
        d = json.loads(text)
        d = d.get("lattice", d)
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    def control_displacements(self, frame: int) -> np.ndarray:
        n = int(np.prod(self.shape))
        if not self.keyframes:
            return np.zeros((n, 3))
        keys = sorted(self.keyframes, key=lambda k: k["frame"])
        ts = [k["frame"] for k in keys]
        vals = [np.asarray(k["displacements"], dtype=np.float64).reshape(n, 3) for k in keys]
        if frame <= ts[0]:
            return vals[0]
        if frame >= ts[-1]:
            return vals[-1]
        i = int(np.searchsorted(ts, frame, side="right")) - 1
        a = (frame - ts[i]) / (ts[i + 1] - ts[i])
        return (1 - a) * vals[i] + a * vals[i + 1]


def deform_sequence(positions: np.ndarray, cfg: LatticeConfig) -> tuple[list, LatticeDeformer]:
    box = cfg.box
    if box is None:
        lo, hi = positions.min(0), positions.max(0)
        pad = 1e-6 * np.maximum(hi - lo, 1e-9)
        box = (lo - pad, hi + pad)
    lat = LatticeDeformer(box, cfg.shape, positions)
    if lat.n_outside:
        warnings.warn("%d vertices outside the lattice box; using clamped cells" % lat.n_outside)
    seq = [positions + lat.displacement(cfg.control_displacements(k)) for k in range(cfg.frames)]
    return seq, lat
