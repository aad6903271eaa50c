"""Implicit 1-to-4 subdivision forest over a base tetrahedral mesh.

Every base tet is the root of a quadtree.  Splitting a node inserts an
interior control point, stored as barycentric coordinates of the node's
tet, and replaces the node by the four tets obtained by swapping each corner
for that point.  Points are numbered base vertices first, then control
points in creation order.
"""
from __future__ import annotations

import logging

import numpy as np
import torch

log = logging.getLogger(__name__)

BARY_FLOOR = 1e-3
MAX_DEPTH = 5


def constrain_barycentric(raw):
    """Strictly positive coordinates summing to one, from an unconstrained 4-vector."""
    if isinstance(raw, np.ndarray):
        e = np.exp(raw - raw.max(-1, keepdims=True))
        sm = e / e.sum(-1, keepdims=True)
    else:
        sm = torch.softmax(raw, -1)
    return (sm + BARY_FLOOR) / (1 + 4 * BARY_FLOOR)


def child_tets(tet: np.ndarray, c) -> np.ndarray:
    """The four children of ``tet`` (4 ids) split at point id ``c``; child i
    replaces corner i, which keeps the parent's orientation."""
    out = np.tile(np.asarray(tet), (4, 1))
    out[np.arange(4), np.arange(4)] = c
    return out


class SubdivisionForest:
    def __init__(self, tets, n_base_vertices: int, max_depth: int = MAX_DEPTH):
        tets = np.asarray(tets, dtype=np.int64)
        self.n_roots = len(tets)
        self.n_base_vertices = int(n_base_vertices)
        self.max_depth = max_depth
        self._parent = [-1] * self.n_roots
        self._children = [None] * self.n_roots
        self._depth = [0] * self.n_roots
        self._corners = [t.copy() for t in tets]
        self._control = [-1] * self.n_roots  # point id created by splitting this node
        self._control_node = []  # node that owns each control point
        self._cache = {}

    # structure ------------------------------------------------------------
    @property
    def n_nodes(self) -> int:
        return len(self._parent)

    @property
    def n_points(self) -> int:
        return self.n_base_vertices + len(self._control_node)

    @property
    def n_splits(self) -> int:
        return len(self._control_node)

    @property
    def root_tets(self) -> np.ndarray:
        return np.array(self._corners[: self.n_roots]).reshape(-1, 4)

    def is_leaf(self, node: int) -> bool:
        return self._children[node] is None

    def depth(self, node: int) -> int:
        return self._depth[node]

    def parent(self, node: int) -> int:
        return self._parent[node]

    def children(self, node: int):
        return self._children[node]

    def corners(self, node: int) -> np.ndarray:
        return self._corners[node]

    def control_point(self, node: int) -> int:
        return self._control[node]

    def _get(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    @property
    def depths(self) -> np.ndarray:
        return self._get("depths", lambda: np.array(self._depth, dtype=np.int64))

    @property
    def parents(self) -> np.ndarray:
        return self._get("parents", lambda: np.array(self._parent, dtype=np.int64))

    @property
    def node_corners(self) -> np.ndarray:
        return self._get("corners", lambda: np.array(self._corners, dtype=np.int64).reshape(-1, 4))

    @property
    def leaves(self) -> np.ndarray:
        """Leaf node ids in ascending (creation) order."""
        return self._get("leaves", lambda: np.array(
            [i for i, c in enumerate(self._children) if c is None], dtype=np.int64))

    @property
    def leaf_tets(self) -> np.ndarray:
        return self.node_corners[self.leaves]

    @property
    def control_nodes(self) -> np.ndarray:
        """Owning node of each control point (point id ``n_base_vertices + k``)."""
        return self._get("control_nodes", lambda: np.array(self._control_node, dtype=np.int64))

    def subdivide(self, node: int):
        """Split a leaf.  Returns ``(child ids, new point id)`` or None when the
        node is internal or already at the depth cap."""
        if not self.is_leaf(node):
            log.warning("node %d is not a leaf; split ignored", node)
            return None
        if self._depth[node] >= self.max_depth:
            log.info("node %d at depth cap %d; split refused", node, self.max_depth)
            return None
        c = self.n_points
        self._control_node.append(node)
        self._control[node] = c
        first = self.n_nodes
        kids = list(range(first, first + 4))
        for tet in child_tets(self._corners[node], c):
            self._parent.append(node)
            self._children.append(None)
            self._depth.append(self._depth[node] + 1)
            self._corners.append(tet)
            self._control.append(-1)
        self._children[node] = kids
        self._cache.clear()
        return kids, c

    # geometry -------------------------------------------------------------
    def _levels(self):
        def build():
            out = []
            cn = self.control_nodes
            if len(cn) == 0:
                return out
            d = self.depths[cn]
            for level in range(d.max() + 1):
                k = np.nonzero(d == level)[0]
                if len(k):
                    out.append((torch.from_numpy(k + self.n_base_vertices),
                                torch.from_numpy(cn[k]),
                                torch.from_numpy(self.node_corners[cn[k]])))
            return out
        return self._get("levels", build)

    def resolve_points(self, base_positions, control_raw):
        """World positions of all points, base vertices first.

        ``control_raw`` holds one raw barycentric 4-vector per node; only rows
        of split nodes are read.  Differentiable in both arguments.
        """
        numpy_in = isinstance(base_positions, np.ndarray)
        X = torch.tensor(base_positions) if numpy_in else base_positions
        raw = torch.as_tensor(control_raw, dtype=X.dtype)
        if self.n_splits == 0:
            return X.numpy() if numpy_in else X
        X = torch.cat([X, X.new_zeros(self.n_splits, 3)])
        for pids, nodes, corners in self._levels():
            b = constrain_barycentric(raw[nodes])
            new = (b[:, :, None] * X[corners]).sum(1)
            X = X.index_copy(0, pids, new)
        return X.detach().numpy() if numpy_in else X

    def resolve_leaf_tets(self, base_positions, control_raw):
        """(n_leaves, 4, 3) world corners of the render tets."""
        X = self.resolve_points(base_positions, control_raw)
        return X[self.leaf_tets]

    # traversal and serialization -----------------------------------------
    def preorder(self, root=None) -> list:
        roots = range(self.n_roots) if root is None else [root]
        out = []
        for r in roots:
            stack = [r]
            while stack:
                n = stack.pop()
                out.append(n)
                if self._children[n] is not None:
                    stack.extend(reversed(self._children[n]))
        return out

    def to_bits(self) -> np.ndarray:
        """Preorder structure bits over all roots (1 = internal, 0 = leaf)."""
        return np.array([0 if self.is_leaf(n) else 1 for n in self.preorder()], dtype=np.uint8)

    @classmethod
    def from_bits(cls, tets, n_base_vertices, bits, max_depth=MAX_DEPTH):
        """Rebuild a forest from its structure bits.  Returns the forest and
        the new node id of every preorder position."""
        f = cls(tets, n_base_vertices, max_depth)
        bits = list(np.asarray(bits, dtype=np.uint8))
        ids = []
        pos = 0
        for r in range(f.n_roots):
            stack = [r]
            while stack:
                if pos >= len(bits):
                    raise ValueError("structure bitstream too short")
                n = stack.pop()
                ids.append(n)
                b = bits[pos]
                pos += 1
                if b:
                    res = f.subdivide(n)
                    if res is None:
                        raise ValueError("structure bitstream exceeds the depth cap")
                    stack.extend(reversed(res[0]))
        if pos != len(bits):
            raise ValueError("trailing structure bits")
        return f, np.array(ids, dtype=np.int64)

    def subtree_leaves(self, node: int) -> list:
        return [n for n in self.preorder(node) if self.is_leaf(n)]


def align_mean_quaternion(qs: np.ndarray) -> np.ndarray:
    """Normalised mean of unit quaternions after flipping each onto the
    hemisphere of the first."""
    qs = np.asarray(qs, dtype=np.float64)
    sign = np.where(qs @ qs[0] < 0, -1.0, 1.0)
    m = (qs * sign[:, None]).sum(0) / len(qs)
    return m / np.linalg.norm(m)


def collapse_to_level(forest: SubdivisionForest, level: int, opacity_raw, rotation, weights_raw,
                      alive=None):
    """Render set truncated at ``level``.

    Attribute arrays are indexed by node id; only leaf rows are read.
    Returns ``(node_ids, opacity_raw, rotation, weights_raw)`` of the selected
    nodes in ascending id order, so a deep enough level reproduces the leaves.  A merged node takes the largest child opacity, the sign-aligned
    mean of the child rotations, and for corner j the mean activated weight of
    the three children that share that corner.  Leaves with ``alive`` False
    are skipped; a subtree with no live leaf disappears.
    """
    if level < 0:
        raise ValueError("level must be >= 0")
    op = np.asarray(opacity_raw, dtype=np.float64)
    rot = np.asarray(rotation, dtype=np.float64)
    rot = rot / np.linalg.norm(rot, axis=-1, keepdims=True)
    w = np.maximum(np.asarray(weights_raw, dtype=np.float64), 0.0)
    alive = np.ones(forest.n_nodes, dtype=bool) if alive is None else np.asarray(alive, dtype=bool)

    def merge(n):
        if forest.is_leaf(n):
            return (op[n], rot[n], w[n]) if alive[n] else None
        parts = [(i, merge(c)) for i, c in enumerate(forest.children(n))]
        parts = [(i, p) for i, p in parts if p is not None]
        if not parts:
            return None
        o = max(p[0] for _, p in parts)
        q = align_mean_quaternion(np.array([p[1] for _, p in parts]))
        wn = np.zeros(4)
        for j in range(4):
            shared = [p[2][j] for i, p in parts if i != j]
            # corner j of child j is the control point: fall back to all children
            wn[j] = np.mean(shared) if shared else np.mean([p[2][j] for _, p in parts])
        return o, q, wn

    ids, ops, rots, ws = [], [], [], []
    for r in range(forest.n_roots):
        stack = [r]
        while stack:
            n = stack.pop()
            if forest.depth(n) < level and not forest.is_leaf(n):
                stack.extend(reversed(forest.children(n)))
                continue
            m = merge(n)
            if m is None:
                continue
            ids.append(n)
            ops.append(m[0])
            rots.append(m[1])
            ws.append(m[2])
    order = np.argsort(ids, kind="stable")
    return (np.array(ids, dtype=np.int64)[order], np.array(ops)[order],
            np.array(rots).reshape(-1, 4)[order], np.array(ws).reshape(-1, 4)[order])
