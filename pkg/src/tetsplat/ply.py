"""Export to the PLY layout used by common Gaussian splatting viewers."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from plyfile import PlyData, PlyElement

from .field import StructuredField
from .reparam import activate_weights, covariance_to_scale_rotation, gaussian_geometry, quaternion_to_matrix

MIN_SCALE = 1e-30


def _fields(n_rest: int):
    names = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += ["f_rest_%d" % i for i in range(n_rest)]
    names += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    return names


@torch.no_grad()
def field_to_splats(fld: StructuredField, mode: str):
    """Per visible leaf: mean, covariance, SH (C, 3) and raw opacity.

    View-dependent colour is a weighted blend of corner SH sets evaluated
    along per-corner directions; a single SH set per Gaussian can only
    carry the weight-blended coefficients, which is what is exported."""
    nodes = torch.from_numpy(fld.visible_leaves())
    P = fld.points(mode)
    tets = torch.from_numpy(fld.forest.node_corners)[nodes]
    w = activate_weights(fld.weights_raw[nodes])
    mu, cov, _ = gaussian_geometry(P[tets], w, fld.rotation[nodes])
    wn = w / w.sum(-1, keepdim=True)
    sh = (wn[:, :, None, None] * fld.sh[tets]).sum(1)
    return mu.numpy(), cov.numpy(), sh.numpy(), fld.opacity_raw[nodes].numpy()


def write_ply(path, means, covs, sh, opacity_raw) -> Path:
    n, C = len(means), sh.shape[1]
    scales, quats = covariance_to_scale_rotation(covs) if n else (np.zeros((0, 3)), np.zeros((0, 4)))
    rest = np.swapaxes(sh[:, 1:], 1, 2).reshape(n, 3 * (C - 1))   # channel-major, as viewers expect
    cols = [means, np.zeros((n, 3)), sh[:, 0], rest, opacity_raw[:, None],
            np.log(np.maximum(scales, MIN_SCALE)), quats]
    data = np.concatenate(cols, axis=1).astype(np.float32)
    names = _fields(3 * (C - 1))
    arr = np.empty(n, dtype=[(k, "<f4") for k in names])
    for i, k in enumerate(names):
        arr[k] = data[:, i]
    path = Path(path)
    PlyData([PlyElement.describe(arr, "vertex")], byte_order="<").write(str(path))
    return path


def export_ply(fld: StructuredField, mode: str, path) -> Path:
    return write_ply(path, *field_to_splats(fld, mode))


def read_ply(path) -> dict:
    """Means, covariances, SH and raw opacity (float64) from a splat PLY."""
    v = PlyData.read(str(path))["vertex"].data
    names = v.dtype.names
    col = lambda k: np.asarray(v[k], dtype=np.float64)
    n_rest = sum(1 for k in names if k.startswith("f_rest_"))
    if n_rest % 3:
        raise ValueError("f_rest count %d is not a multiple of 3" % n_rest)
    means = np.stack([col("x"), col("y"), col("z")], 1)
    dc = np.stack([col("f_dc_%d" % i) for i in range(3)], 1)
    rest = np.stack([col("f_rest_%d" % i) for i in range(n_rest)], 1) if n_rest else np.zeros((len(v), 0))
    sh = np.concatenate([dc[:, None], np.swapaxes(rest.reshape(len(v), 3, n_rest // 3), 1, 2)], axis=1)
    scales = np.exp(np.stack([col("scale_%d" % i) for i in range(3)], 1))
    q = np.stack([col("rot_%d" % i) for i in range(4)], 1)
    R = quaternion_to_matrix(torch.as_tensor(q)).numpy()
    covs = R @ (scales[:, :, None] ** 2 * np.swapaxes(R, 1, 2))
    return {"means": means, "covs": covs, "sh": sh, "opacity_raw": col("opacity"), "scales": scales, "quats": q}
