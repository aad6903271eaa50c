"""Scene ingestion (NeRF-synthetic style manifests) and synthetic scenes
rendered from a reference field."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .field import StructuredField
from .splat import Camera, load_image, orbit_cameras, save_image
from .tetmesh import build_uniform_grid
from .train import SceneDataset

# OpenGL camera axes (x right, y up, looking down -z) to OpenCV (y down, +z forward)
GL_TO_CV = np.diag([1.0, -1.0, -1.0, 1.0])


class SceneError(ValueError):
    pass


def check_rigid(c2w: np.ndarray, tol=1e-4):
    R = c2w[:3, :3]
    if c2w.shape != (4, 4) or not np.allclose(c2w[3], [0, 0, 0, 1], atol=tol):
        raise SceneError("camera transform must be a 4x4 affine matrix")
    if np.abs(R.T @ R - np.eye(3)).max() > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise SceneError("camera rotation is not orthonormal with det +1")


@dataclass
class ManifestFrame:
    file_path: str
    c2w: np.ndarray      # OpenCV convention
    intrinsics: dict


def parse_manifest(d: dict, width=None, height=None) -> list:
    frames = d.get("frames")
    if not frames:
        raise SceneError("manifest has no frames")
    out = []
    for fr in frames:
        T = np.asarray(fr["transform_matrix"], dtype=np.float64)
        check_rigid(T)
        intr = {k: fr.get(k, d.get(k)) for k in ("fl_x", "fl_y", "cx", "cy", "w", "h", "camera_angle_x")}
        out.append(ManifestFrame(fr["file_path"], T @ GL_TO_CV, intr))
    return out


def _resolve_image(root: Path, file_path: str) -> Path:
    p = (root / file_path)
    if p.exists():
        return p
    for ext in (".png", ".ppm", ".jpg"):
        q = p.with_name(p.name + ext)
        if q.exists():
            return q
    raise SceneError("image not found: %s" % p)


def _camera(intr: dict, c2w, w, h) -> Camera:
    w = int(intr.get("w") or w)
    h = int(intr.get("h") or h)
    if intr.get("fl_x"):
        fx = float(intr["fl_x"])
        fy = float(intr.get("fl_y") or fx)
    elif intr.get("camera_angle_x") is not None:
        fx = fy = 0.5 * w / math.tan(0.5 * float(intr["camera_angle_x"]))
    else:
        raise SceneError("frame has neither focal length nor camera_angle_x")
    cx = float(intr["cx"]) if intr.get("cx") is not None else w / 2
    cy = float(intr["cy"]) if intr.get("cy") is not None else h / 2
    return Camera(fx, fy, cx, cy, w, h, c2w)


def bbox_mask(cam: Camera, bbox) -> np.ndarray:
    """1 where the pixel ray hits the axis-aligned box, else 0."""
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bbox)
    ys, xs = np.mgrid[0:cam.height, 0:cam.width].astype(np.float64)
    d_cam = np.stack([(xs - cam.cx) / cam.fx, (ys - cam.cy) / cam.fy, np.ones_like(xs)], -1)
    d = d_cam @ cam.c2w[:3, :3].T
    o = cam.origin
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (lo - o) / d
        t1 = (hi - o) / d
    tmin = np.nanmax(np.minimum(t0, t1), axis=-1)
    tmax = np.nanmin(np.maximum(t0, t1), axis=-1)
    return ((tmax >= np.maximum(tmin, 0.0))).astype(np.float64)


def load_scene(path, background=None, mask_mode="alpha", bbox=None, downscale=1) -> SceneDataset:
    """Dataset from a ``transforms*.json`` manifest.

    mask_mode: "alpha" uses the PNG alpha (falling back to the bbox / ones
    when an image has none), "bbox" always uses ``bbox``, "none" omits masks.
    Images with alpha are composited over the background."""
    path = Path(path)
    if not path.exists():
        raise SceneError("manifest not found: %s" % path)
    d = json.loads(path.read_text())
    bg = np.asarray(background if background is not None else d.get("background", (0.0, 0.0, 0.0)), dtype=np.float64)
    cams, imgs, masks = [], [], []
    for fr in parse_manifest(d):
        rgb, alpha = load_image(_resolve_image(path.parent, fr.file_path))
        h, w = rgb.shape[:2]
        cam = _camera(fr.intrinsics, fr.c2w, w, h)
        if (cam.width, cam.height) != (w, h):
            raise SceneError("image %s is %dx%d, manifest says %dx%d" % (fr.file_path, w, h, cam.width, cam.height))
        has_alpha = alpha is not None and np.any(alpha < 1)
        if alpha is not None:
            rgb = rgb * alpha[..., None] + bg * (1 - alpha[..., None])
        if downscale > 1:
            s = int(downscale)
            H, W = (h // s) * s, (w // s) * s
            rgb = rgb[:H, :W].reshape(H // s, s, W // s, s, 3).mean((1, 3))
            if alpha is not None:
                alpha = alpha[:H, :W].reshape(H // s, s, W // s, s).mean((1, 3))
            cam = Camera(cam.fx / s, cam.fy / s, (cam.cx + 0.5) / s - 0.5, (cam.cy + 0.5) / s - 0.5, W // s, H // s,
                         cam.c2w)
        if mask_mode == "alpha" and has_alpha:
            m = alpha
        elif mask_mode in ("alpha", "bbox") and bbox is not None:
            m = bbox_mask(cam, bbox)
        elif mask_mode == "bbox":
            raise SceneError("mask_mode 'bbox' needs a bounding box")
        else:
            m = np.ones((cam.height, cam.width))
        cams.append(cam)
        imgs.append(rgb)
        masks.append(m)
    return SceneDataset(cams, imgs, None if mask_mode == "none" else masks, tuple(float(x) for x in bg))


def write_scene(directory, cameras, images, alphas=None, background=(0.0, 0.0, 0.0), name="transforms.json",
                bits=16):
    """Write PNGs plus a manifest in the OpenGL convention.  ``images`` are
    composited over ``background``; with alphas they are stored with
    straight (unpremultiplied) colour so loading recomposites them."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    stem = Path(name).stem
    bg = np.asarray(background, dtype=np.float64)
    frames = []
    for i, (cam, img) in enumerate(zip(cameras, images)):
        rel = "images/%s_%03d.png" % (stem, i)
        img = np.asarray(img, dtype=np.float64)
        a = None
        if alphas is not None:
            a = np.asarray(alphas[i], dtype=np.float64)
            with np.errstate(divide="ignore", invalid="ignore"):
                img = np.where(a[..., None] > 0, (img - bg * (1 - a[..., None])) / a[..., None], 0.0)
        save_image(directory / rel, img, a, bits=bits)
        frames.append({"file_path": rel, "transform_matrix": (cam.c2w @ GL_TO_CV).tolist(),
                       "fl_x": cam.fx, "fl_y": cam.fy, "cx": cam.cx, "cy": cam.cy, "w": cam.width, "h": cam.height})
    manifest = {"frames": frames, "background": list(background)}
    (directory / name).write_text(json.dumps(manifest, indent=1))
    return directory / name


# ---------------------------------------------------------------------------
# synthetic scenes


def randomize_field(fld: StructuredField, rng: np.random.Generator, jitter=0.0, sh_scale=0.3):
    """Random colours, weights, opacities and rotations; ``jitter`` displaces
    interior vertices by that fraction of the mean edge length."""
    n_nodes, P = fld.forest.n_nodes, fld.forest.n_points
    t = lambda a: torch.as_tensor(a, dtype=fld.dtype)
    with torch.no_grad():
        sh = np.zeros(tuple(fld.sh.shape))
        sh[:, 0] = rng.uniform(-1.4, 1.4, size=(P, 3))
        if sh.shape[1] > 1:
            sh[:, 1:] = rng.normal(0, sh_scale, size=(P, sh.shape[1] - 1, 3))
        fld.sh.copy_(t(sh))
        fld.weights_raw.copy_(t(rng.uniform(0.05, 0.5, size=(n_nodes, 4))))
        fld.opacity_raw.copy_(t(rng.uniform(-1.0, 2.5, size=n_nodes)))
        q = rng.normal(size=(n_nodes, 4))
        fld.rotation.copy_(t(q / np.linalg.norm(q, axis=1, keepdims=True)))
        if jitter:
            V = fld.mesh.vertices
            e = fld.mesh.edges()
            h = np.linalg.norm(V[e[:, 0]] - V[e[:, 1]], axis=1).mean()
            lo, hi = V.min(0), V.max(0)
            interior = np.all((V > lo + 1e-9) & (V < hi - 1e-9), axis=1)
            off = rng.uniform(-jitter * h, jitter * h, size=V.shape) * interior[:, None]
            fld.vertex_offset.copy_(t(off))
    return fld


def reference_field(resolution=(4, 4, 4), bbox=((0, 0, 0), (1, 1, 1)), sh_degree=1, seed=0, jitter=0.0):
    fld = StructuredField(build_uniform_grid(bbox, resolution), sh_degree=sh_degree)
    return randomize_field(fld, np.random.default_rng(seed), jitter=jitter)


def scene_cameras(fld: StructuredField, n_views, size, seed=0, radius_factor=1.6):
    V = fld.mesh.vertices
    center = 0.5 * (V.min(0) + V.max(0))
    radius = radius_factor * float(np.linalg.norm(V.max(0) - V.min(0)))
    return orbit_cameras(n_views, center, radius, size, size, seed=seed)


@torch.no_grad()
def render_dataset(fld: StructuredField, cameras, mode="none", background=(0.0, 0.0, 0.0)) -> SceneDataset:
    outs = [fld.render(c, mode, background)[0] for c in cameras]
    return SceneDataset(list(cameras), [o.rgb for o in outs], [o.alpha for o in outs], tuple(background))
