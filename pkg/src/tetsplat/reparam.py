"""Tetrahedron -> 3D Gaussian reparameterization and related helpers.

Every leaf tet carries four corner weights, an opacity and a rotation;
spherical-harmonic colour coefficients live on the mesh points.  The
Gaussian mean is the weighted corner average and its covariance the
weighted scatter of the corners about that mean, rotated by the learned
quaternion.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

W_FLOOR = 1e-6

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
         -0.4570457994644658, 1.445305721320277, -0.5900435899266435)


class ReparamError(ValueError):
    pass


def sh_coeff_count(degree: int) -> int:
    if not 0 <= degree <= 3:
        raise ValueError("SH degree must be in 0..3")
    return (degree + 1) ** 2


def rgb_to_sh(rgb):
    return (rgb - 0.5) / SH_C0


def sh_to_rgb(dc):
    return dc * SH_C0 + 0.5


def eval_sh(degree: int, sh: torch.Tensor, dirs: torch.Tensor) -> torch.Tensor:
    """Real SH evaluation in the usual splatting basis.

    sh: (..., C, 3) with C >= (degree+1)^2; dirs: (..., 3) unit vectors.
    """
    out = SH_C0 * sh[..., 0, :]
    if degree < 1:
        return out
    x, y, z = dirs[..., 0:1], dirs[..., 1:2], dirs[..., 2:3]
    out = out - SH_C1 * y * sh[..., 1, :] + SH_C1 * z * sh[..., 2, :] - SH_C1 * x * sh[..., 3, :]
    if degree < 2:
        return out
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    out = (out
           + SH_C2[0] * xy * sh[..., 4, :]
           + SH_C2[1] * yz * sh[..., 5, :]
           + SH_C2[2] * (2.0 * zz - xx - yy) * sh[..., 6, :]
           + SH_C2[3] * xz * sh[..., 7, :]
           + SH_C2[4] * (xx - yy) * sh[..., 8, :])
    if degree < 3:
        return out
    return (out
            + SH_C3[0] * y * (3 * xx - yy) * sh[..., 9, :]
            + SH_C3[1] * xy * z * sh[..., 10, :]
            + SH_C3[2] * y * (4 * zz - xx - yy) * sh[..., 11, :]
            + SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy) * sh[..., 12, :]
            + SH_C3[4] * x * (4 * zz - xx - yy) * sh[..., 13, :]
            + SH_C3[5] * z * (xx - yy) * sh[..., 14, :]
            + SH_C3[6] * x * (xx - 3 * yy) * sh[..., 15, :])


def activate_weights(raw):
    return torch.relu(raw) + W_FLOOR


def normalize_quaternion(q):
    return q / q.norm(dim=-1, keepdim=True)


def quaternion_to_matrix(q: torch.Tensor) -> torch.Tensor:
    """Rotation matrices from (w, x, y, z) quaternions; normalises first."""
    q = normalize_quaternion(q)
    w, x, y, z = q.unbind(-1)
    return torch.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], -1).reshape(q.shape[:-1] + (3, 3))


def quaternion_multiply(a, b):
    """Hamilton product, (w, x, y, z) layout; works on numpy or torch."""
    aw, ax, ay, az = (a[..., i] for i in range(4))
    bw, bx, by, bz = (b[..., i] for i in range(4))
    parts = [aw * bw - ax * bx - ay * by - az * bz,
             aw * bx + ax * bw + ay * bz - az * by,
             aw * by - ax * bz + ay * bw + az * bx,
             aw * bz + ax * by - ay * bx + az * bw]
    if isinstance(a, torch.Tensor):
        return torch.stack(parts, -1)
    return np.stack(parts, -1)


def matrix_to_quaternion(R: np.ndarray) -> np.ndarray:
    """(w, x, y, z) with w >= 0 for proper rotations, batched."""
    R = np.asarray(R, dtype=np.float64)
    flat = R.reshape(-1, 3, 3)
    out = np.empty((len(flat), 4))
    for k, m in enumerate(flat):
        tr = np.trace(m)
        if tr > 0:
            s = 2.0 * np.sqrt(tr + 1.0)
            q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        else:
            i = int(np.argmax(np.diag(m)))
            j, l = (i + 1) % 3, (i + 2) % 3
            s = 2.0 * np.sqrt(1.0 + m[i, i] - m[j, j] - m[l, l])
            q = np.zeros(4)
            q[0] = (m[l, j] - m[j, l]) / s
            q[1 + i] = 0.25 * s
            q[1 + j] = (m[j, i] + m[i, j]) / s
            q[1 + l] = (m[l, i] + m[i, l]) / s
        q = np.asarray(q)
        out[k] = q if q[0] >= 0 else -q
    return out.reshape(R.shape[:-2] + (4,))


def gaussian_geometry(corners: torch.Tensor, weights: torch.Tensor, quat: torch.Tensor):
    """Mean and covariance from (n, 4, 3) corners, (n, 4) nonnegative weights
    and (n, 4) rotation quaternions.  Returns ``(mu, cov, cov_unrotated)``."""
    wsum = weights.sum(-1, keepdim=True)
    if bool((wsum <= 0).any()):
        raise ReparamError("corner weights sum to zero")
    mu = (weights[..., None] * corners).sum(-2) / wsum
    d = corners - mu[..., None, :]
    cov0 = torch.einsum("nk,nki,nkj->nij", weights, d, d)
    R = quaternion_to_matrix(quat)
    cov = R @ cov0 @ R.transpose(-1, -2)
    return mu, cov, cov0


def color_from_sh(corner_sh: torch.Tensor, weights: torch.Tensor, corners: torch.Tensor,
                  origin: torch.Tensor, degree: int, frame: torch.Tensor | None = None):
    """Weighted mean of per-corner SH colours viewed from ``origin``.

    corner_sh: (n, 4, C, 3).  ``frame`` (n, 3, 3), when given, rotates the view
    directions by its transpose into the frame the coefficients were fit in.
    """
    d = corners - origin
    d = d / d.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    if frame is not None:
        d = torch.einsum("nji,nkj->nki", frame, d)
    c = eval_sh(degree, corner_sh, d) + 0.5
    w = weights[..., None]
    return ((w * c).sum(-2) / w.sum(-2)).clamp(0.0, 1.0)


@dataclass
class Gaussians:
    means: torch.Tensor      # (n, 3)
    covs: torch.Tensor       # (n, 3, 3)
    colors: torch.Tensor     # (n, 3)
    opacities: torch.Tensor  # (n,)

    def __len__(self):
        return len(self.means)

    def detach(self) -> "Gaussians":
        return Gaussians(self.means.detach(), self.covs.detach(), self.colors.detach(),
                         self.opacities.detach())

    def transformed(self, R: torch.Tensor, t: torch.Tensor) -> "Gaussians":
        """Rigidly moved copy; colours unchanged."""
        return Gaussians(self.means @ R.T + t, R @ self.covs @ R.T, self.colors, self.opacities)


def tet_to_gaussian(corners, weights_raw, quat_raw, opacity_raw, corner_sh, origin, degree,
                    frame=None) -> Gaussians:
    w = activate_weights(weights_raw)
    mu, cov, _ = gaussian_geometry(corners, w, quat_raw)
    col = color_from_sh(corner_sh, w, corners, origin, degree, frame)
    return Gaussians(mu, cov, col, torch.sigmoid(opacity_raw))


def covariance_to_scale_rotation(cov):
    """Scales (descending) and a proper rotation with cov = R diag(s^2) R^T."""
    cov = np.asarray(cov, dtype=np.float64)
    if cov.shape[-2:] != (3, 3):
        raise ValueError("expected (..., 3, 3) covariances")
    sym_err = np.abs(cov - np.swapaxes(cov, -1, -2)).max(axis=(-1, -2))
    if np.any(sym_err > 1e-9 * np.maximum(np.abs(cov).max(axis=(-1, -2)), 1e-300)):
        raise ValueError("covariance is not symmetric")
    flat = cov.reshape(-1, 3, 3)
    lam, R = np.linalg.eigh(0.5 * (flat + np.swapaxes(flat, -1, -2)))
    lam, R = lam[:, ::-1], R[:, :, ::-1].copy()
    R[np.linalg.det(R) < 0, :, 2] *= -1
    scales = np.sqrt(np.clip(lam, 0.0, None))
    lead = cov.shape[:-2]
    return scales.reshape(lead + (3,)), matrix_to_quaternion(R).reshape(lead + (4,))
