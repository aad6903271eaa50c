"""Command-line interface: ``tetsplat <command> ...``.

Errors are reported as a single JSON line on stderr with a nonzero exit
status (2 for invalid input, 1 for failures while running).
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .field import MODES, StructuredField
from .hierarchy import MAX_DEPTH
from .splat import Camera, save_image
from .tetmesh import MeshError, TetMesh, build_uniform_grid, format_node, quality_report, read_tetgen, validate_conformal


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _seed(default: int) -> int:
    env = os.environ.get("STFD_SEED")
    if env is None:
        return default
    try:
        return int(env)
    except ValueError:
        raise UsageError("STFD_SEED must be an integer, got %r" % env) from None


def _emit(obj):
    print(json.dumps(obj, sort_keys=True))


# ---------------------------------------------------------------------------
# init


def _new_checkpoint(mesh: TetMesh, args) -> Checkpoint:
    report = validate_conformal(mesh)
    if not report.ok:
        raise MeshError("mesh is not conformal: %d violations, first %s"
                        % (len(report.violations), report.violations[0]))
    seed = _seed(args.seed)
    torch.manual_seed(seed)
    fld = StructuredField(mesh, sh_degree=args.sh_degree, max_depth=args.max_depth)
    return Checkpoint(fld, args.mode, None, seed, 0)


def cmd_init_grid(args):
    lo, hi = args.bbox[:3], args.bbox[3:]
    mesh = build_uniform_grid((lo, hi), args.res)
    ck = _new_checkpoint(mesh, args)
    save_checkpoint(args.out, ck)
    _emit({"out": str(args.out), "tets": mesh.n_tets, "vertices": mesh.n_vertices, "inverted": 0})


def cmd_init_mesh(args):
    for p in (args.node, args.ele):
        if not Path(p).exists():
            raise FileNotFoundError("no such file: %s" % p)
    mesh = read_tetgen(args.node, args.ele)
    ck = _new_checkpoint(mesh, args)
    save_checkpoint(args.out, ck)
    _emit({"out": str(args.out), "tets": mesh.n_tets, "vertices": mesh.n_vertices})


# ---------------------------------------------------------------------------
# training and evaluation


def _load_scene(args):
    from .scene import load_scene

    bbox = None
    if getattr(args, "mask_bbox", None):
        bbox = (args.mask_bbox[:3], args.mask_bbox[3:])
    return load_scene(args.scene, mask_mode=args.mask, bbox=bbox, downscale=args.downscale)


def cmd_train(args):
    from .train import LearningRates, LossWeights, TrainConfig, Trainer

    ck = load_checkpoint(args.ckpt)
    data = _load_scene(args)
    seed = _seed(args.seed)
    torch.manual_seed(seed)
    mode = args.mode or ck.mode
    cfg = TrainConfig(
        iterations=args.iters, mode=mode, split_threshold=args.split_threshold,
        mask_threshold=args.mask_threshold, max_depth=args.max_depth, control_interval=args.control_interval,
        split_from=args.split_from, split_until=args.split_until, max_leaves=args.max_leaves,
        loss=LossWeights(args.lambda1, args.lambda2, args.lambda3, args.lambda4, args.lambda_sv, args.r),
        lr=LearningRates(args.lr_map, args.lr_sh, args.lr_weights, args.lr_opacity, args.lr_rotation,
                         args.lr_control, args.lr_vertices),
        seed=seed, log_every=args.log_every)
    tr = Trainer(ck.field, data, cfg, metrics_path=args.metrics, dump_dir=Path(args.out).parent)
    if ck.optimizer and mode == ck.mode:
        tr.opt.import_state(ck.optimizer)
    tr.iteration = ck.iteration
    out = Path(args.out)

    def snapshot(path):
        state = tr.opt.export_state() if args.save_optimizer else None
        save_checkpoint(path, Checkpoint(ck.field, mode, cfg.to_dict(), seed, tr.iteration, state))

    def cb(t, m):
        if args.checkpoint_every and t.iteration % args.checkpoint_every == 0:
            snapshot(out.with_name("%s.%06d%s" % (out.stem, t.iteration, out.suffix)))

    if args.metrics and Path(args.metrics).exists():
        Path(args.metrics).unlink()
    hist = tr.run(args.iters, callback=cb)
    snapshot(out)
    last = hist[-1] if hist else {}
    _emit({"out": str(out), "iteration": tr.iteration, "psnr": last.get("psnr"), "loss": last.get("loss"),
           **ck.field.summary(), "inverted": tr.inverted()})


def _camera_from_args(args, fld: StructuredField) -> Camera:
    if args.pose:
        return Camera.from_dict(json.loads(Path(args.pose).read_text()))
    if args.camera is not None:
        if not args.scene:
            raise UsageError("--camera needs --scene")
        from .scene import load_scene

        cams = load_scene(args.scene, mask_mode="none").cameras
        if not 0 <= args.camera < len(cams):
            raise UsageError("camera index %d out of range (scene has %d)" % (args.camera, len(cams)))
        return cams[args.camera]
    from .scene import scene_cameras

    return scene_cameras(fld, args.orbit_views, args.size)[args.orbit_index % args.orbit_views]


def cmd_render(args):
    ck = load_checkpoint(args.ckpt)
    cam = _camera_from_args(args, ck.field)
    with torch.no_grad():
        out, _ = ck.field.render(cam, ck.mode, tuple(args.background))
    save_image(args.out, out.rgb.numpy(), out.alpha.numpy() if args.alpha else None)
    _emit({"out": str(args.out), "width": cam.width, "height": cam.height, "gaussians": len(out.visible)})


def cmd_lod(args):
    ck = load_checkpoint(args.ckpt)
    cam = _camera_from_args(args, ck.field)
    out, nodes = ck.field.render_level(cam, ck.mode, args.level, tuple(args.background))
    save_image(args.out, out.rgb.numpy(), out.alpha.numpy() if args.alpha else None)
    _emit({"out": str(args.out), "level": args.level, "gaussians": len(nodes)})


def cmd_eval(args):
    from .train import TrainConfig, Trainer

    ck = load_checkpoint(args.ckpt)
    data = _load_scene(args)
    tr = Trainer(ck.field, data, TrainConfig(mode=ck.mode))
    rows = tr.evaluate()
    mean = {"view": "mean", "psnr": float(np.mean([r["psnr"] for r in rows])),
            "ssim": float(np.mean([r["ssim"] for r in rows]))}
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["view", "psnr", "ssim"])
            w.writeheader()
            w.writerows(rows + [mean])
    _emit({"views": len(rows), "psnr": mean["psnr"], "ssim": mean["ssim"]})


def cmd_quality(args):
    ck = load_checkpoint(args.ckpt)
    X = ck.field.base_numpy(ck.mode)
    rep = quality_report(X, ck.field.mesh.tets)
    if args.per_tet:
        rep.to_csv(args.per_tet)
    summary = rep.summary()
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "mean", "std"])
            for k in ("AR", "ARG", "AVR"):
                w.writerow([k, summary[k + "_mean"], summary[k + "_std"]])
            w.writerow(["inverted", summary["inverted"], ""])
    _emit(summary)


def cmd_export_ply(args):
    from .ply import export_ply

    ck = load_checkpoint(args.ckpt)
    export_ply(ck.field, ck.mode, args.out)
    _emit({"out": str(args.out), "gaussians": len(ck.field.visible_leaves())})


# ---------------------------------------------------------------------------
# dynamics


def _write_frames(args, ck, seq, extra):
    from .dynamics import Playback

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pb = Playback(ck.field, ck.mode)
    cam = _camera_from_args(args, ck.field)
    diag = []
    for k, X in enumerate(seq):
        img, info = pb.frame(X, cam, tuple(args.background))
        save_image(out / ("frame_%04d.png" % k), img.rgb.numpy())
        (out / ("frame_%04d.node" % k)).write_text(format_node(X))
        diag.append({"frame": k, **info})
    (out / "diagnostics.json").write_text(json.dumps({"frames": diag, **extra}, indent=1))
    _emit({"out": str(out), "frames": len(seq), "max_inverted": max(d["inverted"] for d in diag), **extra})


def cmd_simulate(args):
    from .dynamics import SimConfig, simulate

    ck = load_checkpoint(args.ckpt)
    cfg = SimConfig.from_json(Path(args.sim).read_text())
    X = ck.field.base_numpy(ck.mode)
    seq = simulate(ck.field.mesh, X, cfg)
    _write_frames(args, ck, seq, {})


def cmd_deform(args):
    from .dynamics import LatticeConfig, deform_sequence

    ck = load_checkpoint(args.ckpt)
    cfg = LatticeConfig.from_json(Path(args.lattice).read_text())
    seq, lat = deform_sequence(ck.field.base_numpy(ck.mode), cfg)
    _write_frames(args, ck, seq, {"outside_lattice": lat.n_outside})


# ---------------------------------------------------------------------------
# synthetic data


def cmd_make_scene(args):
    from .scene import reference_field, render_dataset, scene_cameras, write_scene

    seed = _seed(args.seed)
    torch.manual_seed(seed)
    lo, hi = args.bbox[:3], args.bbox[3:]
    ref = reference_field(tuple(args.res), (lo, hi), args.sh_degree, seed, args.jitter)
    cams = scene_cameras(ref, args.views, args.size, seed=seed)
    data = render_dataset(ref, cams, "none")
    path = write_scene(args.out, data.cameras, [im.numpy() for im in data.images],
                       [m.numpy() for m in data.masks])
    if args.test_views:
        test = render_dataset(ref, scene_cameras(ref, args.test_views, args.size, seed=seed + 1), "none")
        write_scene(args.out, test.cameras, [im.numpy() for im in test.images], [m.numpy() for m in test.masks],
                    name="transforms_test.json")
    if args.reference:
        save_checkpoint(args.reference, Checkpoint(ref, "none", None, seed, 0))
    _emit({"manifest": str(path), "views": args.views, "tets": ref.mesh.n_tets})


# ---------------------------------------------------------------------------
# parser


def _add_camera(p):
    p.add_argument("--camera", type=int, help="view index in --scene")
    p.add_argument("--scene", help="transforms.json for --camera")
    p.add_argument("--pose", help="JSON camera file (fx, fy, cx, cy, width, height, c2w)")
    p.add_argument("--orbit-index", type=int, default=0)
    p.add_argument("--orbit-views", type=int, default=8)
    p.add_argument("--size", type=int, default=256, help="image size for orbit cameras")
    p.add_argument("--background", type=float, nargs=3, default=(0.0, 0.0, 0.0))


def _add_scene(p):
    p.add_argument("--scene", required=True, help="transforms.json")
    p.add_argument("--mask", choices=("alpha", "bbox", "none"), default="alpha")
    p.add_argument("--mask-bbox", type=float, nargs=6, metavar=("X0", "Y0", "Z0", "X1", "Y1", "Z1"))
    p.add_argument("--downscale", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tetsplat", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--threads", type=int, default=None, help="worker threads for torch and numba")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def init_common(q):
        q.add_argument("--out", required=True)
        q.add_argument("--sh-degree", type=int, default=3)
        q.add_argument("--max-depth", type=int, default=MAX_DEPTH)
        q.add_argument("--mode", choices=MODES, default="homeo+quality")
        q.add_argument("--seed", type=int, default=0)

    q = sub.add_parser("init-grid", help="checkpoint on a uniform Freudenthal grid")
    q.add_argument("--bbox", type=float, nargs=6, default=(0, 0, 0, 1, 1, 1), metavar=("X0", "Y0", "Z0", "X1", "Y1", "Z1"))
    q.add_argument("--res", type=int, nargs=3, required=True)
    init_common(q)
    q.set_defaults(func=cmd_init_grid)

    q = sub.add_parser("init-mesh", help="checkpoint from TetGen .node/.ele files")
    q.add_argument("--node", required=True)
    q.add_argument("--ele", required=True)
    init_common(q)
    q.set_defaults(func=cmd_init_mesh)

    q = sub.add_parser("train", help="optimise a checkpoint against a scene")
    q.add_argument("--ckpt", required=True)
    q.add_argument("--out", required=True)
    _add_scene(q)
    q.add_argument("--mode", choices=MODES)
    q.add_argument("--iters", type=int, default=30000)
    q.add_argument("--metrics", help="JSON-lines metrics file")
    q.add_argument("--log-every", type=int, default=10)
    q.add_argument("--checkpoint-every", type=int, default=0)
    q.add_argument("--save-optimizer", action="store_true")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--split-threshold", type=float, default=0.0002)
    q.add_argument("--mask-threshold", type=float, default=0.05)
    q.add_argument("--max-depth", type=int, default=MAX_DEPTH)
    q.add_argument("--control-interval", type=int, default=100)
    q.add_argument("--split-from", type=int, default=500)
    q.add_argument("--split-until", type=float, default=0.5)
    q.add_argument("--max-leaves", type=int)
    for name, val in (("lambda1", 0.8), ("lambda2", 0.2), ("lambda3", 0.5), ("lambda4", 10.0),
                      ("lambda-sv", 1.0), ("r", 0.8)):
        q.add_argument("--" + name, type=float, default=val)
    for name, val in (("map", 1e-3), ("sh", 2.5e-3), ("weights", 5e-3), ("opacity", 5e-2), ("rotation", 1e-3),
                      ("control", 1e-3), ("vertices", 1.6e-4)):
        q.add_argument("--lr-" + name, type=float, default=val)
    q.set_defaults(func=cmd_train)

    q = sub.add_parser("render", help="render a checkpoint to PNG")
    q.add_argument("--ckpt", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--alpha", action="store_true", help="write an alpha channel")
    _add_camera(q)
    q.set_defaults(func=cmd_render)

    q = sub.add_parser("eval", help="PSNR/SSIM against a scene")
    q.add_argument("--ckpt", required=True)
    q.add_argument("--out", help="CSV table")
    _add_scene(q)
    q.set_defaults(func=cmd_eval)

    q = sub.add_parser("lod", help="render a collapsed level of detail")
    q.add_argument("--ckpt", required=True)
    q.add_argument("--level", type=int, required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--alpha", action="store_true")
    _add_camera(q)
    q.set_defaults(func=cmd_lod)

    q = sub.add_parser("quality", help="mesh quality statistics")
    q.add_argument("--ckpt", required=True)
    q.add_argument("--out", help="summary CSV")
    q.add_argument("--per-tet", help="per-tet CSV")
    q.set_defaults(func=cmd_quality)

    q = sub.add_parser("export-ply", help="splat PLY export")
    q.add_argument("--ckpt", required=True)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_export_ply)

    q = sub.add_parser("simulate", help="mass-spring simulation playback")
    q.add_argument("--ckpt", required=True)
    q.add_argument("--sim", required=True, help="simulation JSON")
    q.add_argument("--out", required=True, help="output directory")
    _add_camera(q)
    q.set_defaults(func=cmd_simulate)

    q = sub.add_parser("deform", help="lattice deformation playback")
    q.add_argument("--ckpt", required=True)
    q.add_argument("--lattice", required=True, help="lattice JSON")
    q.add_argument("--out", required=True, help="output directory")
    _add_camera(q)
    q.set_defaults(func=cmd_deform)

    q = sub.add_parser("make-scene", help="render a synthetic scene from a random reference")
    q.add_argument("--out", required=True, help="output directory")
    q.add_argument("--res", type=int, nargs=3, default=(4, 4, 4))
    q.add_argument("--bbox", type=float, nargs=6, default=(0, 0, 0, 1, 1, 1))
    q.add_argument("--views", type=int, default=16)
    q.add_argument("--test-views", type=int, default=0)
    q.add_argument("--size", type=int, default=64)
    q.add_argument("--sh-degree", type=int, default=1)
    q.add_argument("--jitter", type=float, default=0.0)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--reference", help="also save the reference checkpoint here")
    q.set_defaults(func=cmd_make_scene)
    return p


INPUT_ERRORS = (UsageError, CheckpointError, MeshError, FileNotFoundError, json.JSONDecodeError, ValueError, KeyError)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.threads:
            import numba

            torch.set_num_threads(args.threads)
            numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
        args.func(args)
        return 0
    except Exception as e:  # noqa: BLE001 - every failure becomes one JSON line
        err = e
    code = 2 if isinstance(err, INPUT_ERRORS) else 1
    msg = str(err).replace("\n", " ")
    print(json.dumps({"error": type(err).__name__, "message": msg, "exit": code}), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
