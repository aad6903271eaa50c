"""Binary checkpoint container.

Layout: ``b"STFD"``, u32 version, u32 section count, then sections of
``u16 name length, name, u8 kind, payload``.  JSON and text payloads are a
u64 byte length plus UTF-8; tensors are a u8 dtype code, u8 rank, u64 dims
and raw little-endian data.  Everything is written in a fixed order so a
load followed by a save reproduces the file byte for byte.

Node attributes are stored in forest preorder: leaf rows for weights,
opacity, rotation and mask flags, internal rows for the split controls.
Point SH rows are the base vertices followed by the control points of the
internal nodes in the same preorder.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .field import INIT_OPACITY, INIT_WEIGHT, StructuredField, inverse_sigmoid
from .hierarchy import SubdivisionForest
from .tetmesh import TetMesh, format_ele, format_node, parse_ele, parse_node

MAGIC = b"STFD"
VERSION = 1

_JSON, _TEXT, _TENSOR = 0, 1, 2
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_CODES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def encode_sections(sections: list) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(sections)))
    for name, value in sections:
        key = name.encode()
        buf.write(struct.pack("<H", len(key)))
        buf.write(key)
        if isinstance(value, np.ndarray):
            a = np.ascontiguousarray(value)
            dt = a.dtype.newbyteorder("<") if a.dtype.kind in "fi" else a.dtype
            if dt not in _CODES:
                raise CheckpointError("unsupported dtype %s for %s" % (a.dtype, name))
            buf.write(struct.pack("<BBB", _TENSOR, _CODES[dt], a.ndim))
            buf.write(struct.pack("<%dQ" % a.ndim, *a.shape))
            buf.write(a.astype(dt, copy=False).tobytes())
        else:
            kind, text = (_TEXT, value) if isinstance(value, str) else (_JSON, _dumps(value))
            raw = text.encode()
            buf.write(struct.pack("<BQ", kind, len(raw)))
            buf.write(raw)
    return buf.getvalue()


def decode_sections(data: bytes) -> dict:
    if data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    try:
        version, count = struct.unpack_from("<II", data, 4)
    except struct.error:
        raise CheckpointError("truncated header") from None
    if version != VERSION:
        raise CheckpointError("unsupported checkpoint version %d (expected %d)" % (version, VERSION))
    pos = 12
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2:pos + 2 + n].decode()
            pos += 2 + n
            kind = data[pos]
            pos += 1
            if kind == _TENSOR:
                code, ndim = data[pos], data[pos + 1]
                pos += 2
                shape = struct.unpack_from("<%dQ" % ndim, data, pos)
                pos += 8 * ndim
                dt = _DTYPES[code]
                size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
                if pos + size > len(data):
                    raise CheckpointError("truncated tensor %s" % name)
                out[name] = np.frombuffer(data, dt, int(np.prod(shape, dtype=np.int64)), pos).reshape(shape)
                pos += size
            elif kind in (_JSON, _TEXT):
                (length,) = struct.unpack_from("<Q", data, pos)
                pos += 8
                text = data[pos:pos + length].decode()
                if len(text.encode()) != length:
                    raise CheckpointError("truncated section %s" % name)
                pos += length
                out[name] = json.loads(text) if kind == _JSON else text
            else:
                raise CheckpointError("unknown section kind %d" % kind)
    except (struct.error, KeyError, IndexError) as e:
        raise CheckpointError("corrupt checkpoint: %s" % e) from None
    if pos != len(data):
        raise CheckpointError("trailing bytes after last section")
    return out


# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    field: StructuredField
    mode: str = "homeo+quality"
    train_config: dict | None = None
    seed: int = 0
    iteration: int = 0
    optimizer: dict | None = None    # name -> (step, exp_avg, exp_avg_sq), field row layout


def _layout(forest: SubdivisionForest):
    pre = np.array(forest.preorder(), dtype=np.int64)
    leaf = np.array([forest.is_leaf(int(n)) for n in pre], dtype=bool)
    internal = pre[~leaf]
    pts = np.concatenate([np.arange(forest.n_base_vertices),
                          np.array([forest.control_point(int(n)) for n in internal], dtype=np.int64)])
    return pre[leaf], internal, pts


def _rows(name, leaves, internal, points):
    if name == "control_raw":
        return internal
    if name in ("weights_raw", "opacity_raw", "rotation"):
        return leaves
    if name == "sh":
        return points
    return None


def _f32(t) -> np.ndarray:
    return t.detach().cpu().numpy().astype("<f4")


def _named_tensors(fld: StructuredField):
    yield "vertex_offset", fld.vertex_offset
    for n in ("control_raw", "weights_raw", "opacity_raw", "rotation", "sh"):
        yield n, getattr(fld, n)
    for n, p in fld.map.named_parameters():
        yield "map." + n, p


def to_bytes(ck: Checkpoint) -> bytes:
    f = ck.field
    leaves, internal, points = _layout(f.forest)
    meta = {"version": VERSION, "mode": ck.mode, "seed": int(ck.seed), "iteration": int(ck.iteration),
            "sh_degree": f.sh_degree, "max_depth": f.forest.max_depth, "map": f.map.config(),
            "train_config": ck.train_config, "has_optimizer": ck.optimizer is not None}
    sections = [("meta", meta), ("mesh.node", format_node(f.mesh.vertices)), ("mesh.ele", format_ele(f.mesh.tets)),
                ("forest.bits", f.forest.to_bits()), ("masked", f.masked[leaves].astype(np.uint8))]
    for name, t in _named_tensors(f):
        rows = _rows(name, leaves, internal, points)
        sections.append(("param." + name, _f32(t if rows is None else t[torch.from_numpy(rows)])))
    if ck.optimizer is not None:
        steps = {}
        for name, t in _named_tensors(f):
            if name not in ck.optimizer:
                continue
            step, m, v = ck.optimizer[name]
            steps[name] = int(step)
            rows = _rows(name, leaves, internal, points)
            for tag, mom in (("m", m), ("v", v)):
                mom = torch.as_tensor(mom)
                sections.append(("adam.%s.%s" % (name, tag), _f32(mom if rows is None else mom[torch.from_numpy(rows)])))
        sections.append(("adam.steps", steps))
    return encode_sections(sections)


def from_bytes(data: bytes) -> Checkpoint:
    sec = decode_sections(data)
    for k in ("meta", "mesh.node", "mesh.ele", "forest.bits", "masked"):
        if k not in sec:
            raise CheckpointError("missing section %s" % k)
    meta = sec["meta"]
    pts, first = parse_node(sec["mesh.node"])
    mesh = TetMesh(pts, parse_ele(sec["mesh.ele"], first))
    fld = StructuredField(mesh, sh_degree=meta["sh_degree"], max_depth=meta["max_depth"], map_config=meta["map"])
    forest, _ = SubdivisionForest.from_bits(mesh.tets, mesh.n_vertices, sec["forest.bits"], meta["max_depth"])
    fld.forest = forest
    leaves, internal, points = _layout(forest)
    N, P = forest.n_nodes, forest.n_points
    d = fld.dtype
    init = {"control_raw": torch.zeros(N, 4, dtype=d),
            "weights_raw": torch.full((N, 4), INIT_WEIGHT, dtype=d),
            "opacity_raw": torch.full((N,), inverse_sigmoid(INIT_OPACITY), dtype=d),
            "rotation": torch.tensor([[1.0, 0, 0, 0]], dtype=d).repeat(N, 1),
            "sh": torch.zeros((P,) + tuple(fld.sh.shape[1:]), dtype=d)}
    for name, t in init.items():
        setattr(fld, name, nn.Parameter(t))
    fld.masked = np.zeros(N, dtype=bool)
    fld.masked[leaves] = sec["masked"].astype(bool)
    params = dict(_named_tensors(fld))

    def put(dst, name, arr):
        rows = _rows(name, leaves, internal, points)
        src = torch.as_tensor(np.array(arr), dtype=d)
        target = dst if rows is None else dst[torch.from_numpy(rows)]
        if src.shape != target.shape:
            raise CheckpointError("shape mismatch for %s: %s vs %s" % (name, tuple(src.shape), tuple(target.shape)))
        if rows is None:
            dst.copy_(src)
        else:
            dst[torch.from_numpy(rows)] = src

    with torch.no_grad():
        for name, p in params.items():
            key = "param." + name
            if key not in sec:
                raise CheckpointError("missing section %s" % key)
            put(p, name, sec[key])
    optim = None
    if meta.get("has_optimizer"):
        optim = {}
        for name, step in sec["adam.steps"].items():
            p = params[name]
            m, v = torch.zeros_like(p.detach()), torch.zeros_like(p.detach())
            put(m, name, sec["adam.%s.m" % name])
            put(v, name, sec["adam.%s.v" % name])
            optim[name] = (step, m, v)
    return Checkpoint(fld, meta["mode"], meta["train_config"], meta["seed"], meta["iteration"], optim)


def save_checkpoint(path, ck: Checkpoint) -> Path:
    path = Path(path)
    path.write_bytes(to_bytes(ck))
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError("checkpoint not found: %s" % path)
    return from_bytes(path.read_bytes())
