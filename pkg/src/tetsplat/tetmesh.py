"""Tetrahedral mesh container, grid construction, conformality checks and
element quality metrics.

All geometry is evaluated in float64.  Metric functions accept either a
single tetrahedron as a ``(4, 3)`` array or a batch as ``(K, 4, 3)``.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# normalisation making the regular tetrahedron score exactly 1
QUALITY_C0 = 6.0 * math.sqrt(2.0)

# local vertex indices of the face opposite to vertex i
FACE_OF = np.array([[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]])

EDGES_OF = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]])


class MeshError(ValueError):
    """Raised for malformed or inverted mesh input."""


def signed_volume(p0, p1, p2, p3):
    """det[p1-p0, p2-p0, p3-p0] / 6.  Broadcasts over leading axes."""
    p0 = np.asarray(p0, dtype=np.float64)
    a = np.asarray(p1, dtype=np.float64) - p0
    b = np.asarray(p2, dtype=np.float64) - p0
    c = np.asarray(p3, dtype=np.float64) - p0
    return np.einsum("...i,...i->...", a, np.cross(b, c)) / 6.0


def tet_points(positions, tets) -> np.ndarray:
    return np.asarray(positions, dtype=np.float64)[np.asarray(tets)]


def _as_batch(tet) -> tuple[np.ndarray, bool]:
    t = np.asarray(tet, dtype=np.float64)
    if t.ndim == 2:
        return t[None], True
    return t, False


def signed_volumes(positions, tets) -> np.ndarray:
    P = tet_points(positions, tets)
    return signed_volume(P[:, 0], P[:, 1], P[:, 2], P[:, 3])


def _unbatch(x, single):
    return float(x[0]) if single else x


def quality_gamma(tet):
    """Aspect-ratio-gamma quality ``6*sqrt(2) * V / S_rms**3``.

    ``S_rms`` is the root-mean-square edge length.  Equals 1 for a regular
    tetrahedron at any scale and 0 for degenerate or inverted elements.
    """
    P, single = _as_batch(tet)
    vol = signed_volume(P[:, 0], P[:, 1], P[:, 2], P[:, 3])
    e = P[:, EDGES_OF[:, 1]] - P[:, EDGES_OF[:, 0]]
    s_rms = np.sqrt(np.mean(np.sum(e * e, axis=-1), axis=-1))
    with np.errstate(divide="ignore", invalid="ignore"):
        q = QUALITY_C0 * vol / s_rms**3
    q = np.where((vol > 0) & (s_rms > 0), q, 0.0)
    return _unbatch(q, single)


def face_areas(P: np.ndarray) -> np.ndarray:
    """Areas of the four faces, ``P`` shaped (K, 4, 3) -> (K, 4)."""
    F = P[:, FACE_OF]
    n = np.cross(F[:, :, 1] - F[:, :, 0], F[:, :, 2] - F[:, :, 0])
    return 0.5 * np.linalg.norm(n, axis=-1)


def circumradius(P: np.ndarray) -> np.ndarray:
    a = P[:, 1] - P[:, 0]
    b = P[:, 2] - P[:, 0]
    c = P[:, 3] - P[:, 0]
    num = (
        np.sum(a * a, -1)[:, None] * np.cross(b, c)
        + np.sum(b * b, -1)[:, None] * np.cross(c, a)
        + np.sum(c * c, -1)[:, None] * np.cross(a, b)
    )
    den = 2.0 * np.einsum("ki,ki->k", a, np.cross(b, c))
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.linalg.norm(num, axis=-1) / np.abs(den)


def aspect_ratio(tet):
    """``3 r / rho`` with inradius r and circumradius rho; 0 if degenerate."""
    P, single = _as_batch(tet)
    vol = signed_volume(P[:, 0], P[:, 1], P[:, 2], P[:, 3])
    area = face_areas(P).sum(-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = 3.0 * np.abs(vol) / area
        ar = 3.0 * r / circumradius(P)
    ar = np.where(vol > 0, ar, 0.0)
    ar = np.nan_to_num(ar, nan=0.0, posinf=0.0)
    return _unbatch(ar, single)


def _ring_extrema(n_vertices: int, tets: np.ndarray, values: np.ndarray):
    vmax = np.full(n_vertices, -np.inf)
    vmin = np.full(n_vertices, np.inf)
    for j in range(4):
        np.maximum.at(vmax, tets[:, j], values)
        np.minimum.at(vmin, tets[:, j], values)
    return vmax[tets].max(axis=1), vmin[tets].min(axis=1)


def adjacent_volume_ratios(positions, tets) -> np.ndarray:
    """Largest / smallest |volume| over the vertex 1-ring of every tet."""
    tets = np.asarray(tets)
    vol = np.abs(signed_volumes(positions, tets))
    hi, lo = _ring_extrema(len(positions), tets, vol)
    with np.errstate(divide="ignore"):
        return np.where(lo > 0, hi / lo, np.inf)


def adjacent_volume_ratio(mesh: "TetMesh", k: int) -> float:
    tets = mesh.tets
    ring = np.any(np.isin(tets, tets[k]), axis=1)
    vol = np.abs(signed_volumes(mesh.vertices, tets[ring]))
    if vol.min() <= 0:
        return math.inf
    return float(vol.max() / vol.min())


def count_inverted(positions, tets) -> int:
    return int(np.count_nonzero(signed_volumes(positions, tets) <= 0))


@dataclass
class ConformityReport:
    ok: bool
    boundary_faces: int
    interior_faces: int
    violations: list = field(default_factory=list)


def _face_table(tets: np.ndarray):
    """Sorted face keys, owning tet and opposite local vertex, for every face."""
    K = len(tets)
    faces = tets[:, FACE_OF].reshape(-1, 3)
    owner = np.repeat(np.arange(K), 4)
    opposite = np.tile(np.arange(4), K)
    keys = np.sort(faces, axis=1)
    return keys, owner, opposite


def validate_conformal(mesh: "TetMesh") -> ConformityReport:
    """Every face must be used once (boundary) or twice with the opposite
    vertices on opposite sides (interior)."""
    tets = mesh.tets
    if len(tets) == 0:
        return ConformityReport(True, 0, 0)
    keys, owner, opposite = _face_table(tets)
    uniq, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    X = mesh.vertices
    side = np.sign(
        signed_volume(
            X[keys[:, 0]], X[keys[:, 1]], X[keys[:, 2]], X[tets[owner, opposite]]
        )
    )
    violations = []
    for f in np.flatnonzero(counts > 2):
        violations.append({"face": tuple(int(v) for v in uniq[f]), "reason": "shared by %d tets" % counts[f]})
    order = np.argsort(inverse, kind="stable")
    starts = np.concatenate([[0], np.cumsum(counts)])
    for f in np.flatnonzero(counts == 2):
        a, b = order[starts[f]], order[starts[f] + 1]
        if side[a] * side[b] >= 0:
            violations.append({"face": tuple(int(v) for v in uniq[f]), "reason": "same-side neighbours"})
    return ConformityReport(
        ok=not violations,
        boundary_faces=int(np.count_nonzero(counts == 1)),
        interior_faces=int(np.count_nonzero(counts == 2)),
        violations=violations,
    )


@dataclass(frozen=True)
class TetMesh:
    """Shared vertex positions plus 4-index tetrahedra.

    Construction rejects out-of-range indices and, unless
    ``check_orientation=False``, any tet with non-positive signed volume.
    """

    vertices: np.ndarray
    tets: np.ndarray
    check_orientation: bool = True

    def __post_init__(self):
        V = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        T = np.ascontiguousarray(self.tets, dtype=np.int64).reshape(-1, 4)
        if T.size and (T.min() < 0 or T.max() >= len(V)):
            raise MeshError("vertex index out of range")
        V.flags.writeable = False
        T.flags.writeable = False
        object.__setattr__(self, "vertices", V)
        object.__setattr__(self, "tets", T)
        if self.check_orientation and len(T):
            vol = signed_volumes(V, T)
            bad = np.flatnonzero(vol <= 0)
            if len(bad):
                raise MeshError(
                    "%d inverted or degenerate tets (first: %d, volume %.3g)"
                    % (len(bad), bad[0], vol[bad[0]])
                )

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_tets(self) -> int:
        return len(self.tets)

    def volumes(self) -> np.ndarray:
        return signed_volumes(self.vertices, self.tets)

    def edges(self) -> np.ndarray:
        e = self.tets[:, EDGES_OF].reshape(-1, 2)
        return np.unique(np.sort(e, axis=1), axis=0)

    def with_vertices(self, vertices, check_orientation=False) -> "TetMesh":
        return TetMesh(vertices, self.tets, check_orientation=check_orientation)


def build_uniform_grid(bbox, resolution) -> TetMesh:
    """Split each grid cube into 6 tets along its main diagonal (Kuhn /
    Freudenthal), which is conformal across neighbouring cubes."""
    lo = np.asarray(bbox[0], dtype=np.float64)
    hi = np.asarray(bbox[1], dtype=np.float64)
    res = np.asarray(resolution, dtype=np.int64)
    if res.shape != (3,) or np.any(res < 1):
        raise MeshError("resolution must be three integers >= 1")
    if np.any(hi - lo <= 0):
        raise MeshError("bounding box has zero or negative extent")
    nx, ny, nz = (int(r) for r in res)
    axes = [np.linspace(lo[d], hi[d], res[d] + 1) for d in range(3)]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    verts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)

    def vid(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    I, J, K = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    base = np.stack([I.ravel(), J.ravel(), K.ravel()], axis=1)
    tets = []
    for perm in itertools.permutations(range(3)):
        steps = np.eye(3, dtype=np.int64)[list(perm)]
        path = [base, base + steps[0], base + steps[0] + steps[1], base + 1]
        ids = [vid(p[:, 0], p[:, 1], p[:, 2]) for p in path]
        # odd permutations give negatively oriented paths
        if np.linalg.det(steps) < 0:
            ids[2], ids[3] = ids[3], ids[2]
        tets.append(np.stack(ids, axis=1))
    tets = np.stack(tets, axis=1).reshape(-1, 4)
    return TetMesh(verts, tets)


@dataclass
class QualityReport:
    volume: np.ndarray
    Q: np.ndarray
    AR: np.ndarray
    AVR: np.ndarray
    inverted_count: int

    @property
    def ARG(self) -> np.ndarray:
        # aspect ratio gamma is the same measure as Q
        return self.Q

    def summary(self) -> dict:
        out = {"n_tets": int(len(self.Q)), "inverted": self.inverted_count}
        for name in ("AR", "ARG", "AVR"):
            v = getattr(self, name)
            v = v[np.isfinite(v)]
            out[name + "_mean"] = float(v.mean()) if len(v) else float("nan")
            out[name + "_std"] = float(v.std()) if len(v) else float("nan")
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tet_id", "volume", "Q", "AR", "AVR"])
            for k in range(len(self.Q)):
                w.writerow([k, repr(float(self.volume[k])), repr(float(self.Q[k])),
                            repr(float(self.AR[k])), repr(float(self.AVR[k]))])


def quality_report(positions, tets) -> QualityReport:
    P = tet_points(positions, tets)
    vol = signed_volume(P[:, 0], P[:, 1], P[:, 2], P[:, 3])
    return QualityReport(
        volume=vol,
        Q=quality_gamma(P),
        AR=aspect_ratio(P),
        AVR=adjacent_volume_ratios(positions, tets),
        inverted_count=int(np.count_nonzero(vol <= 0)),
    )


# --- TetGen ASCII .node / .ele -------------------------------------------


def _data_lines(text: str):
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            yield line.split()


def parse_node(text: str) -> tuple[np.ndarray, int]:
    """Return ``(points, first_index)``."""
    lines = _data_lines(text)
    try:
        header = next(lines)
    except StopIteration:
        raise MeshError("empty .node file") from None
    n, dim = int(header[0]), int(header[1])
    if dim != 3:
        raise MeshError(".node dimension must be 3, got %d" % dim)
    rows = [next(lines, None) for _ in range(n)]
    if any(r is None for r in rows):
        raise MeshError(".node file truncated")
    first = int(rows[0][0]) if n else 0
    pts = np.empty((n, 3))
    for r in rows:
        i = int(r[0]) - first
        if not 0 <= i < n:
            raise MeshError("node index %s out of range" % r[0])
        pts[i] = [float(x) for x in r[1:4]]
    return pts, first


def parse_ele(text: str, first_index: int | None = None) -> np.ndarray:
    """Parse tets.  Index base is taken from ``first_index`` (the .node
    numbering) when given, else from the first element index."""
    lines = _data_lines(text)
    try:
        header = next(lines)
    except StopIteration:
        raise MeshError("empty .ele file") from None
    n, per = int(header[0]), int(header[1])
    if per != 4:
        raise MeshError("only linear tets (4 nodes) are supported")
    rows = [next(lines, None) for _ in range(n)]
    if any(r is None for r in rows):
        raise MeshError(".ele file truncated")
    base = first_index if first_index is not None else (int(rows[0][0]) if n else 0)
    return np.array([[int(v) - base for v in r[1:5]] for r in rows], dtype=np.int64).reshape(-1, 4)


def format_node(points) -> str:
    pts = np.asarray(points, dtype=np.float64)
    out = ["%d 3 0 0" % len(pts)]
    out += ["%d %r %r %r" % (i, float(p[0]), float(p[1]), float(p[2])) for i, p in enumerate(pts)]
    return "\n".join(out) + "\n"


def format_ele(tets) -> str:
    T = np.asarray(tets, dtype=np.int64)
    out = ["%d 4 0" % len(T)]
    out += ["%d %d %d %d %d" % (k, *t) for k, t in enumerate(T)]
    return "\n".join(out) + "\n"


def read_tetgen(node_path, ele_path, check_orientation=True) -> TetMesh:
    pts, first = parse_node(Path(node_path).read_text())
    tets = parse_ele(Path(ele_path).read_text(), first_index=first)
    return TetMesh(pts, tets, check_orientation=check_orientation)


def write_tetgen(mesh: TetMesh, stem) -> tuple[Path, Path]:
    stem = Path(stem)
    node, ele = stem.with_suffix(".node"), stem.with_suffix(".ele")
    node.write_text(format_node(mesh.vertices))
    ele.write_text(format_ele(mesh.tets))
    return node, ele
