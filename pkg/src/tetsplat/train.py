"""Losses, optimiser plumbing and the training loop with adaptive control."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field as dc_field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .field import HOMEO_MODES, StructuredField, check_mode
from .splat import Camera
from .tetmesh import count_inverted

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PSNR_CAP = 100.0
Q_CONST = 6.0 * math.sqrt(2.0)


class TrainingDiverged(RuntimeError):
    pass


class InversionError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# losses


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError("shape mismatch: %s vs %s" % (tuple(a.shape), tuple(b.shape)))


def loss_l1(img, gt):
    _same_shape(img, gt)
    return (img - gt).abs().mean()


def _gauss_1d(dtype):
    x = torch.arange(SSIM_WINDOW, dtype=dtype) - SSIM_WINDOW // 2
    g = torch.exp(-x * x / (2 * SSIM_SIGMA ** 2))
    return g / g.sum()


def ssim(img, gt):
    """Mean SSIM of (H, W, C) or (H, W) images with zero-padded 11x11
    Gaussian windows (applied as two separable passes)."""
    _same_shape(img, gt)
    if img.dim() == 2:
        img, gt = img[..., None], gt[..., None]
    C = img.shape[-1]
    a = img.permute(2, 0, 1)
    b = gt.permute(2, 0, 1).to(a.dtype)
    x = torch.cat([a, b, a * a, b * b, a * b])[None]
    g = _gauss_1d(a.dtype)
    r = SSIM_WINDOW // 2
    x = F.conv2d(x, g.view(1, 1, -1, 1).expand(5 * C, 1, -1, 1), padding=(r, 0), groups=5 * C)
    x = F.conv2d(x, g.view(1, 1, 1, -1).expand(5 * C, 1, 1, -1), padding=(0, r), groups=5 * C)
    mu_a, mu_b, e_aa, e_bb, e_ab = x[0].split(C)
    saa = e_aa - mu_a ** 2
    sbb = e_bb - mu_b ** 2
    sab = e_ab - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * sab + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (saa + sbb + SSIM_C2)
    return (num / den).mean()


def loss_ssim(img, gt):
    return 1.0 - ssim(img, gt)


def loss_mask(alpha, gt_mask):
    _same_shape(alpha, gt_mask)
    return (alpha - gt_mask).abs().mean()


def tet_quality(P: torch.Tensor) -> torch.Tensor:
    """Differentiable aspect-ratio gamma for (n, 4, 3) corners; 0 when inverted."""
    e = P[:, [1, 2, 3, 2, 3, 3]] - P[:, [0, 0, 0, 1, 1, 2]]
    s_rms = (e * e).sum(-1).mean(-1).sqrt()
    vol = torch.linalg.det(P[:, 1:] - P[:, :1]) / 6.0
    q = Q_CONST * vol / s_rms ** 3
    return torch.where(vol > 0, q, torch.zeros_like(q))


def loss_quality(positions: torch.Tensor, tets, r=0.8):
    tets = torch.as_tensor(np.asarray(tets, dtype=np.int64))
    return torch.relu(r - tet_quality(positions[tets])).mean()


def loss_sv(positions: torch.Tensor, tets):
    tets = torch.as_tensor(np.asarray(tets, dtype=np.int64))
    P = positions[tets]
    vol = torch.linalg.det(P[:, 1:] - P[:, :1]) / 6.0
    return torch.relu(-vol).mean()


def psnr(img, gt) -> float:
    mse = float(((torch.as_tensor(img) - torch.as_tensor(gt)) ** 2).mean())
    if mse <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse))


# ---------------------------------------------------------------------------
# configuration


@dataclass
class LossWeights:
    l1: float = 0.8
    ssim: float = 0.2
    mask: float = 0.5
    quality: float = 10.0
    sv: float = 1.0
    r: float = 0.8

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError("loss weight %s must be >= 0" % k)


@dataclass
class LearningRates:
    map: float = 1e-3
    sh: float = 2.5e-3
    weights: float = 5e-3
    opacity: float = 5e-2
    rotation: float = 1e-3
    control: float = 1e-3
    vertices: float = 1.6e-4   # times the scene extent

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError("learning rate %s must be >= 0" % k)


@dataclass
class TrainConfig:
    iterations: int = 30000
    mode: str = "homeo+quality"
    split_threshold: float = 0.0002
    mask_threshold: float = 0.05
    max_depth: int = 5
    control_interval: int = 100
    split_from: int = 500
    split_until: float = 0.5        # fraction of the run after which splitting stops
    max_leaves: int | None = None
    loss: LossWeights = dc_field(default_factory=LossWeights)
    lr: LearningRates = dc_field(default_factory=LearningRates)
    seed: int = 0
    log_every: int = 10
    strict_inversion: bool = True

    def __post_init__(self):
        check_mode(self.mode)
        if isinstance(self.loss, dict):
            self.loss = LossWeights(**self.loss)
        if isinstance(self.lr, dict):
            self.lr = LearningRates(**self.lr)
        if self.split_threshold < 0 or self.mask_threshold < 0:
            raise ValueError("thresholds must be >= 0")
        if self.iterations < 0 or self.control_interval < 1:
            raise ValueError("bad iteration settings")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class SceneDataset:
    cameras: list
    images: list                 # (H, W, 3) float64 tensors in [0, 1]
    masks: list | None = None    # (H, W) tensors in [0, 1]
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if len(self.cameras) != len(self.images) or not self.cameras:
            raise ValueError("need one image per camera")
        self.images = [torch.as_tensor(np.asarray(im, dtype=np.float64)) for im in self.images]
        shape = self.images[0].shape
        for cam, im in zip(self.cameras, self.images):
            if im.shape != shape or im.shape != (cam.height, cam.width, 3):
                raise ValueError("all images must share the camera resolution")
        if self.masks is not None:
            self.masks = [torch.as_tensor(np.asarray(m, dtype=np.float64)) for m in self.masks]
            for m in self.masks:
                if m.shape != shape[:2] or m.min() < 0 or m.max() > 1:
                    raise ValueError("masks must be (H, W) with values in [0, 1]")

    def __len__(self):
        return len(self.cameras)


# ---------------------------------------------------------------------------
# optimiser


class FieldOptimizer:
    """Adam over the dense groups plus lazy sparse Adam over the hash tables.

    Parameters are tracked by name so that tensors replaced by a split can be
    re-bound, with their moment rows zero-padded."""

    BETAS = (0.9, 0.999)
    EPS = 1e-15

    def __init__(self, fld: StructuredField, mode: str, lr: LearningRates):
        self.field = fld
        self.mode = check_mode(mode)
        attr_lr = {"sh": lr.sh, "weights_raw": lr.weights, "opacity_raw": lr.opacity,
                   "rotation": lr.rotation, "control_raw": lr.control}
        self.named = {k: getattr(fld, k) for k in attr_lr}
        groups = [{"params": [self.named[k]], "lr": v, "name": k} for k, v in attr_lr.items()]
        sparse = []
        if mode in HOMEO_MODES:
            tables = {id(t) for t in fld.map.hash_parameters()}
            for name, p in fld.map.named_parameters():
                key = "map." + name
                self.named[key] = p
                if id(p) in tables:
                    sparse.append({"params": [p], "lr": lr.map, "name": key})
                else:
                    groups.append({"params": [p], "lr": lr.map, "name": key})
        elif mode != "frozen_vertices":
            ext = float(np.linalg.norm(np.ptp(fld.mesh.vertices, axis=0)))
            self.named["vertex_offset"] = fld.vertex_offset
            groups.append({"params": [fld.vertex_offset], "lr": lr.vertices * ext, "name": "vertex_offset"})
        fld.vertex_offset.requires_grad_("vertex_offset" in self.named)
        for p in fld.map.parameters():
            p.requires_grad_(mode in HOMEO_MODES)
        self.dense = torch.optim.Adam(groups, betas=self.BETAS, eps=self.EPS)
        self.sparse = torch.optim.SparseAdam(sparse, betas=self.BETAS, eps=self.EPS) if sparse else None

    def _optims(self):
        return [o for o in (self.dense, self.sparse) if o is not None]

    def zero_grad(self):
        for o in self._optims():
            o.zero_grad(set_to_none=True)

    def step(self):
        for o in self._optims():
            o.step()

    def rebind(self):
        """Follow parameters the field replaced, padding state with zeros."""
        for o in self._optims():
            for g in o.param_groups:
                name = g["name"]
                if name.startswith("map."):
                    continue
                old = g["params"][0]
                new = getattr(self.field, name)
                if new is old:
                    continue
                st = o.state.pop(old, None)
                if st:
                    for k in ("exp_avg", "exp_avg_sq"):
                        pad = torch.zeros((new.shape[0] - old.shape[0],) + old.shape[1:], dtype=st[k].dtype)
                        st[k] = torch.cat([st[k], pad])
                    o.state[new] = st
                g["params"][0] = new
                self.named[name] = new

    def export_state(self) -> dict:
        """name -> (step, exp_avg, exp_avg_sq) for every parameter with state."""
        out = {}
        for o in self._optims():
            for g in o.param_groups:
                st = o.state.get(g["params"][0])
                if st:
                    out[g["name"]] = (int(st["step"]), st["exp_avg"], st["exp_avg_sq"])
        return out

    def import_state(self, state: dict):
        for o in self._optims():
            for g in o.param_groups:
                if g["name"] in state:
                    step, m, v = state[g["name"]]
                    p = g["params"][0]
                    o.state[p] = {"step": torch.tensor(float(step)) if o is self.dense else step,
                                  "exp_avg": torch.as_tensor(m, dtype=p.dtype).reshape(p.shape).clone(),
                                  "exp_avg_sq": torch.as_tensor(v, dtype=p.dtype).reshape(p.shape).clone()}


# ---------------------------------------------------------------------------
# trainer


class Trainer:
    def __init__(self, fld: StructuredField, data: SceneDataset, config: TrainConfig | None = None,
                 metrics_path=None, dump_dir=None):
        self.field = fld
        self.data = data
        self.cfg = config or TrainConfig()
        self.mode = self.cfg.mode
        self.opt = FieldOptimizer(fld, self.mode, self.cfg.lr)
        self.iteration = 0
        self.rng = np.random.default_rng(self.cfg.seed)
        self._order = []
        self._reset_stats()
        self.metrics_path = Path(metrics_path) if metrics_path else None
        self.dump_dir = Path(dump_dir) if dump_dir else None
        rest = fld.mesh.volumes()
        self._vol_scale = float(np.abs(rest).mean())
        self.history = []

    def _reset_stats(self):
        n = self.field.forest.n_nodes
        self.grad_accum = np.zeros(n)
        self.grad_count = np.zeros(n, dtype=np.int64)

    def next_view(self) -> int:
        if not self._order:
            self._order = list(self.rng.permutation(len(self.data)))
        return int(self._order.pop())

    def losses(self, view: int, retain_screen_grad=False):
        cam: Camera = self.data.cameras[view]
        gt = self.data.images[view]
        lw = self.cfg.loss
        base = self.field.base_positions(self.mode)
        pts = self.field.points(self.mode, base)
        out, nodes = self.field.render(cam, self.mode, self.data.background, retain_screen_grad, points=pts)
        terms = {"l1": loss_l1(out.rgb, gt), "ssim": loss_ssim(out.rgb, gt)}
        total = lw.l1 * terms["l1"] + lw.ssim * terms["ssim"]
        if self.data.masks is not None:
            terms["mask"] = loss_mask(out.alpha, self.data.masks[view])
            total = total + lw.mask * terms["mask"]
        roots = self.field.forest.root_tets
        if self.mode == "homeo+quality":
            terms["quality"] = loss_quality(base, roots, lw.r)
            total = total + lw.quality * terms["quality"]
        if self.mode == "sv_loss":
            terms["sv"] = loss_sv(base, roots) / self._vol_scale
            total = total + lw.sv * terms["sv"]
        terms["loss"] = total
        return terms, out, nodes, base

    def step(self) -> dict:
        view = self.next_view()
        self.opt.zero_grad()
        terms, out, nodes, base = self.losses(view, retain_screen_grad=True)
        if not torch.isfinite(terms["loss"]):
            self._diverged(terms, view)
        terms["loss"].backward()
        vis = out.visible.numpy()
        g = out.screen_grad_norm(self.data.cameras[view]).detach().numpy()
        np.add.at(self.grad_accum, nodes[vis], g[vis])
        np.add.at(self.grad_count, nodes[vis], 1)
        self.opt.step()
        self.iteration += 1
        m = {"iteration": self.iteration, "view": view}
        m.update({k: float(v.detach()) for k, v in terms.items()})
        m["psnr"] = psnr(out.rgb.detach(), self.data.images[view])
        return m

    def _diverged(self, terms, view):
        info = {"iteration": self.iteration, "view": view,
                "terms": {k: float(v.detach()) for k, v in terms.items()}, "summary": self.field.summary(),
                "params": {n: {"finite": bool(torch.isfinite(p).all()), "absmax": float(p.detach().abs().max())}
                           for n, p in self.field.named_parameters() if p.numel()}}
        if self.dump_dir is not None:
            self.dump_dir.mkdir(parents=True, exist_ok=True)
            (self.dump_dir / "divergence.json").write_text(json.dumps(info, indent=1))
        raise TrainingDiverged("non-finite loss at iteration %d: %s" % (self.iteration, json.dumps(info["terms"])))

    def inverted(self) -> int:
        return count_inverted(self.field.base_numpy(self.mode), self.field.forest.root_tets)

    @torch.no_grad()
    def adaptive_control(self, allow_split=True) -> dict:
        f = self.field
        leaves = f.forest.leaves
        live = leaves[~f.masked[leaves]]
        opac = torch.sigmoid(f.opacity_raw[torch.from_numpy(live)]).numpy()
        newly = live[opac < self.cfg.mask_threshold]
        f.masked[newly] = True
        splits = []
        if allow_split:
            live = live[opac >= self.cfg.mask_threshold]
            cnt = self.grad_count[live]
            mean = np.where(cnt > 0, self.grad_accum[live] / np.maximum(cnt, 1), 0.0)
            depth_ok = f.forest.depths[live] < min(self.cfg.max_depth, f.forest.max_depth)
            idx = np.nonzero((mean > self.cfg.split_threshold) & depth_ok)[0]
            if self.cfg.max_leaves is not None:
                room = max(0, (self.cfg.max_leaves - len(leaves)) // 3)
                idx = idx[np.argsort(-mean[idx], kind="stable")][:room]
            cand = live[idx]
            splits = f.split(cand)
            self.opt.rebind()
        self._reset_stats()
        inv = self.inverted()
        report = {"iteration": self.iteration, "splits": len(splits), "masked": int(len(newly)),
                  "leaves": len(f.forest.leaves), "inverted": inv}
        if self.mode in HOMEO_MODES and inv and self.cfg.strict_inversion:
            raise InversionError("%d inverted base tets at iteration %d" % (inv, self.iteration))
        return report

    def run(self, iterations: int | None = None, callback=None) -> list:
        total = self.cfg.iterations if iterations is None else iterations
        stop_split = int(self.cfg.split_until * total)
        log = self.metrics_path.open("a") if self.metrics_path else None
        try:
            for _ in range(total):
                m = self.step()
                it = self.iteration
                if it % self.cfg.control_interval == 0:
                    rep = self.adaptive_control(allow_split=self.cfg.split_from <= it <= stop_split)
                    m["control"] = rep
                if it % self.cfg.log_every == 0 or it == total or "control" in m:
                    s = self.field.summary()
                    m.update(leaves=s["leaves"], masked=s["masked"])
                    m["inverted"] = m["control"]["inverted"] if "control" in m else self.inverted()
                    self.history.append(m)
                    if log:
                        log.write(json.dumps(m, sort_keys=True) + "\n")
                if callback:
                    callback(self, m)
        finally:
            if log:
                log.close()
        return self.history

    @torch.no_grad()
    def evaluate(self, views=None) -> list:
        rows = []
        for v in range(len(self.data)) if views is None else views:
            out, _ = self.field.render(self.data.cameras[v], self.mode, self.data.background)
            gt = self.data.images[v]
            rows.append({"view": v, "psnr": psnr(out.rgb, gt), "ssim": float(ssim(out.rgb, gt))})
        return rows
