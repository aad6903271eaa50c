"""CPU splatting rasterizer.

Gaussians are projected to screen-space ellipses and composited front to
back.  Rather than looping over pixels, the renderer lists every
(pixel, Gaussian) pair whose alpha can reach 1/255, sorts the list by pixel
and depth, and evaluates the compositing recurrence for all pairs at once
with a segmented cumulative sum of log-transmittance.  Everything is plain
torch, so the backward pass is the exact reverse of the forward arithmetic.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import cv2
import numpy as np
import torch

from .reparam import Gaussians

ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
LOWPASS = 0.3


@dataclass
class Camera:
    """Pinhole camera, OpenCV axes (x right, y down, z forward)."""
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    c2w: np.ndarray
    near: float = 0.01

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        R = self.c2w[:3, :3]
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
            raise ValueError("camera rotation must be orthonormal with det +1")

    @property
    def origin(self) -> np.ndarray:
        return self.c2w[:3, 3]

    @property
    def world_to_camera(self):
        R = self.c2w[:3, :3].T
        return R, -R @ self.c2w[:3, 3]

    def scaled(self, factor: float) -> "Camera":
        return Camera(self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor,
                      int(round(self.width * factor)), int(round(self.height * factor)), self.c2w, self.near)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy, "width": self.width,
                "height": self.height, "c2w": self.c2w.tolist(), "near": self.near}

    @classmethod
    def from_dict(cls, d) -> "Camera":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]),
                   np.array(d["c2w"]), d.get("near", 0.01))


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world matrix looking from ``eye`` at ``target``."""
    eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, [1.0, 0.0, 0.0])
    x /= np.linalg.norm(x)
    # y points down in image space
    y = np.cross(z, x)
    c2w = np.eye(4)
    c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = x, y, z, eye
    return c2w


def orbit_cameras(n, center, radius, width, height, fov_deg=45.0, elevations=(20.0, -15.0), seed=None):
    """``n`` cameras spread around ``center``, alternating elevations."""
    f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
    cams = []
    offset = 0.0 if seed is None else float(np.random.default_rng(seed).uniform(0, 2 * math.pi))
    for i in range(n):
        az = offset + 2 * math.pi * i / n
        el = math.radians(elevations[i % len(elevations)])
        eye = np.asarray(center) + radius * np.array([math.cos(el) * math.cos(az),
                                                      math.cos(el) * math.sin(az), math.sin(el)])
        cams.append(Camera(f, f, width / 2, height / 2, width, height, look_at(eye, center)))
    return cams


def project(means, covs, cam: Camera):
    """Screen-space means (n, 2), covariances with the low-pass floor (n, 2, 2)
    and camera depths (n,)."""
    R, t = (torch.as_tensor(a, dtype=means.dtype) for a in cam.world_to_camera)
    p = means @ R.T + t
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    zs = torch.where(z > cam.near, z, torch.ones_like(z))
    mean2d = torch.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], -1)
    zero = torch.zeros_like(z)
    J = torch.stack([
        torch.stack([cam.fx / zs, zero, -cam.fx * x / zs**2], -1),
        torch.stack([zero, cam.fy / zs, -cam.fy * y / zs**2], -1),
    ], -2)
    M = J @ R
    cov2d = M @ covs @ M.transpose(-1, -2) + LOWPASS * torch.eye(2, dtype=means.dtype)
    return mean2d, cov2d, z


@dataclass
class RenderOutput:
    rgb: torch.Tensor     # (H, W, 3)
    alpha: torch.Tensor   # (H, W)
    mean2d: torch.Tensor  # (n, 2); retains its gradient when rendering with grad
    visible: torch.Tensor  # (n,) bool, contributed to at least one pixel
    stats: dict = field(default_factory=dict)

    def screen_grad_norm(self, cam: Camera) -> torch.Tensor:
        """Per-Gaussian norm of the loss gradient w.r.t. its projected mean,
        measured in normalised device units."""
        g = self.mean2d.grad
        if g is None:
            return torch.zeros(len(self.mean2d), dtype=self.mean2d.dtype)
        scale = torch.tensor([cam.width / 2, cam.height / 2], dtype=g.dtype)
        return (g * scale).norm(dim=-1)


def _pairs(mean2d, cov2d, opac, cam):
    """(pixel, gaussian) pairs that can reach ALPHA_MIN.  No gradient."""
    W, H = cam.width, cam.height
    k = 2.0 * torch.log(255.0 * opac.clamp_min(1e-30))
    rx = torch.sqrt(k.clamp_min(0) * cov2d[:, 0, 0])
    ry = torch.sqrt(k.clamp_min(0) * cov2d[:, 1, 1])
    x0 = torch.ceil(mean2d[:, 0] - rx).clamp(0, W).long()
    x1 = torch.floor(mean2d[:, 0] + rx).clamp(-1, W - 1).long()
    y0 = torch.ceil(mean2d[:, 1] - ry).clamp(0, H).long()
    y1 = torch.floor(mean2d[:, 1] + ry).clamp(-1, H - 1).long()
    bw = (x1 - x0 + 1).clamp_min(0)
    bh = (y1 - y0 + 1).clamp_min(0)
    bw = torch.where(k > 0, bw, torch.zeros_like(bw))
    count = bw * bh
    total = int(count.sum())
    if total == 0:
        e = torch.zeros(0, dtype=torch.long)
        return e, e, e
    gid = torch.repeat_interleave(torch.arange(len(count)), count)
    start = torch.cumsum(count, 0) - count
    local = torch.arange(total) - start[gid]
    px = x0[gid] + local % bw[gid]
    py = y0[gid] + torch.div(local, bw[gid], rounding_mode="floor")
    return gid, px, py


def _conic(cov2d):
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    return det, torch.stack([c / det, -b / det, a / det], -1)


def render(g: Gaussians, cam: Camera, background=(0.0, 0.0, 0.0), retain_screen_grad=False) -> RenderOutput:
    dtype = g.means.dtype
    W, H = cam.width, cam.height
    bg = torch.as_tensor(background, dtype=dtype)
    n = len(g)
    mean2d, cov2d, depth = project(g.means, g.covs, cam)
    if retain_screen_grad and mean2d.requires_grad:
        mean2d.retain_grad()
    stats = {"culled_near": 0, "singular": 0, "pairs": 0}
    empty = RenderOutput(bg.expand(H, W, 3).clone(), torch.zeros(H, W, dtype=dtype), mean2d,
                         torch.zeros(n, dtype=torch.bool), stats)
    if n == 0:
        return empty

    with torch.no_grad():
        front = depth > cam.near
        det, _ = _conic(cov2d)
        ok = front & (det > 0) & torch.isfinite(det)
        stats["culled_near"] = int((~front).sum())
        stats["singular"] = int((front & ~ok).sum())
        idx = torch.nonzero(ok).flatten()
        if len(idx) == 0:
            return empty
        gid, px, py = _pairs(mean2d[idx], cov2d[idx], g.opacities[idx], cam)
        gid = idx[gid]
        # exact alpha test on the box candidates before building the graph
        _, conic = _conic(cov2d[gid])
        dx = px.to(dtype) - mean2d[gid, 0]
        dy = py.to(dtype) - mean2d[gid, 1]
        power = -0.5 * (conic[:, 0] * dx * dx + conic[:, 2] * dy * dy) - conic[:, 1] * dx * dy
        keep = (g.opacities[gid] * torch.exp(power)) >= ALPHA_MIN
        gid, px, py = gid[keep], px[keep], py[keep]
        rank = torch.empty(n, dtype=torch.long)
        rank[torch.argsort(depth, stable=True)] = torch.arange(n)
        pix = py * W + px
        order = torch.argsort(pix * n + rank[gid])
        gid, px, py, pix = gid[order], px[order], py[order], pix[order]
    stats["pairs"] = len(gid)
    if len(gid) == 0:
        return empty

    _, conic = _conic(cov2d[gid])
    dx = px.to(dtype) - mean2d[gid, 0]
    dy = py.to(dtype) - mean2d[gid, 1]
    power = -0.5 * (conic[:, 0] * dx * dx + conic[:, 2] * dy * dy) - conic[:, 1] * dx * dy
    alpha = torch.clamp(g.opacities[gid] * torch.exp(power), max=ALPHA_MAX)

    # exclusive transmittance within each pixel's run of the sorted list
    logt = torch.log1p(-alpha)
    cs = torch.cumsum(logt, 0)
    with torch.no_grad():
        first = torch.ones(len(pix), dtype=torch.bool)
        first[1:] = pix[1:] != pix[:-1]
        seg = torch.cumsum(first.long(), 0) - 1
        starts = torch.nonzero(first).flatten()
    base = (cs - logt)[starts]
    T = torch.exp(cs - logt - base[seg])
    w = alpha * T

    P = H * W
    rgb = torch.zeros(P, 3, dtype=dtype).index_add(0, pix, w[:, None] * g.colors[gid])
    log_final = torch.zeros(P, dtype=dtype).index_add(0, pix, logt)
    T_final = torch.exp(log_final)
    rgb = rgb + T_final[:, None] * bg
    visible = torch.zeros(n, dtype=torch.bool)
    visible[gid] = True
    return RenderOutput(rgb.reshape(H, W, 3), (1 - T_final).reshape(H, W), mean2d, visible, stats)


def render_backward(g: Gaussians, cam: Camera, grad_rgb, grad_alpha=None, background=(0.0, 0.0, 0.0)):
    """Gradients of <grad_rgb, rgb> + <grad_alpha, alpha> w.r.t. the Gaussian
    parameters, plus the per-Gaussian screen-space gradient norm."""
    leaves = [t.detach().requires_grad_(True) for t in (g.means, g.covs, g.colors, g.opacities)]
    out = render(Gaussians(*leaves), cam, background, retain_screen_grad=True)
    loss = (out.rgb * torch.as_tensor(grad_rgb, dtype=out.rgb.dtype)).sum()
    if grad_alpha is not None:
        loss = loss + (out.alpha * torch.as_tensor(grad_alpha, dtype=out.alpha.dtype)).sum()
    if loss.requires_grad:
        loss.backward()
    grads = [t.grad if t.grad is not None else torch.zeros_like(t) for t in leaves]
    return {"means": grads[0], "covs": grads[1], "colors": grads[2], "opacities": grads[3],
            "screen_grad_norm": out.screen_grad_norm(cam)}


def to_uint8(img) -> np.ndarray:
    return _quantize(img, 8)


def _quantize(img, bits):
    a = img.detach().numpy() if isinstance(img, torch.Tensor) else np.asarray(img)
    top = (1 << bits) - 1
    return (np.clip(a, 0.0, 1.0) * top + 0.5).astype(np.uint8 if bits == 8 else np.uint16)


def save_image(path, rgb, alpha=None, bits=8):
    """PNG (8 or 16 bit, optional alpha) or binary PPM, chosen by extension."""
    path = str(path)
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    ppm = path.lower().endswith((".ppm", ".pnm"))
    if ppm and (alpha is not None or bits != 8):
        raise ValueError("PPM output is 8-bit RGB only")
    arr = _quantize(rgb, bits)[..., ::-1]
    if alpha is not None:
        arr = np.concatenate([arr, _quantize(alpha, bits)[..., None]], -1)
    if not cv2.imwrite(path, np.ascontiguousarray(arr)):
        raise OSError("could not write image %s" % path)


def load_image(path):
    """Float RGB (H, W, 3) and alpha (H, W) in [0, 1]; alpha is 1 when absent."""
    im = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if im is None:
        raise FileNotFoundError("could not read image %s" % path)
    scale = 65535.0 if im.dtype == np.uint16 else 255.0
    a = im.astype(np.float64) / scale
    if a.ndim == 2:
        a = np.repeat(a[..., None], 3, -1)
    if a.shape[-1] == 4:
        return a[..., 2::-1].copy(), a[..., 3].copy()
    return a[..., 2::-1].copy(), np.ones(a.shape[:2])
