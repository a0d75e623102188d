"""Command-line surface tying the modules into the avatar workflow:

    synth -> train -> sample | fit -> swap | paint | repose -> extract | render

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric abort.
All randomness inside one command flows from its seed flags (training keeps
its generator in the checkpoint, so --resume continues the exact stream).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from ..avatar import (Avatar, AvatarError, extract_mesh, field_closures,
                      fit_codebook, init_avatar_from_index,
                      init_avatar_from_sample, paint_texture, repose,
                      transfer_region, PaintInput)
from ..codebook import CodebookError, pca_fit
from ..field import decoder_hash
from ..geometry.mesh import MeshError, load_mesh, save_mesh
from ..geometry.raster import Camera, CameraError
from ..geometry.skinning import PoseParams
from ..training import NumericAbort, Scan, TrainingError, train
from .checkpoint import (CheckpointError, load_avatar, load_checkpoint,
                         save_avatar, save_checkpoint)
from .config import ConfigError, build_template, default_config, load_config

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_DATA_ERRORS = (MeshError, CodebookError, AvatarError, CheckpointError,
                CameraError, TrainingError, FileNotFoundError, OSError,
                KeyError, json.JSONDecodeError)


def worker_count() -> int:
    """Worker cap from CBAV_THREADS (defaults to 1: serial, reproducible)."""
    try:
        return max(1, int(os.environ.get("CBAV_THREADS", "1")))
    except ValueError:
        return 1


def _load_run_config(path):
    return load_config(path) if path else default_config()


def _scan_paths(scan_dir: Path):
    return sorted(Path(scan_dir).glob("scan_*.ply"))


def _load_scan(ply_path: Path, subject_id: int) -> Scan:
    mesh = load_mesh(ply_path)
    pose_path = ply_path.with_suffix("").with_suffix(".pose.json")
    if not pose_path.exists():
        raise MeshError(f"missing pose sidecar for {ply_path}")
    pose = PoseParams.from_dict(json.loads(pose_path.read_text()))
    return Scan(mesh=mesh, pose=pose, subject_id=subject_id)


def _load_pose(path, template) -> PoseParams:
    pose = PoseParams.from_dict(json.loads(Path(path).read_text()))
    if pose.num_joints != template.num_joints:
        raise MeshError(f"pose has {pose.num_joints} joints, template has "
                        f"{template.num_joints}")
    return pose


def _read_vertex_set(path) -> np.ndarray:
    text = Path(path).read_text().split()
    return np.array([int(t) for t in text], dtype=np.int64)


def _load_image(path) -> np.ndarray:
    from PIL import Image

    arr = np.asarray(Image.open(str(path)).convert("RGB"), dtype=np.float64)
    return arr / 255.0


def _load_camera(path) -> Camera:
    return Camera.from_dict(json.loads(Path(path).read_text()))


# -- subcommands -------------------------------------------------------------

def cmd_synth(args) -> int:
    from ..training import synth_scan

    cfg = _load_run_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    template = build_template(cfg)
    for i in range(args.count):
        scan = synth_scan(template, seed=args.seed + i, subject_id=i)
        save_mesh(scan.mesh, out / f"scan_{i:03d}.ply")
        sidecar = scan.pose.to_dict()
        sidecar["subject_id"] = i
        (out / f"scan_{i:03d}.pose.json").write_text(
            json.dumps(sidecar, indent=1, sort_keys=True))
    print(f"wrote {args.count} scan/pose pairs to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_run_config(args.config)
    template = build_template(cfg)
    paths = _scan_paths(args.scans)
    if not paths:
        raise MeshError(f"no scan_*.ply files in {args.scans}")
    scans = [_load_scan(p, i) for i, p in enumerate(paths)]

    resume_state = None
    if args.resume:
        resume_state, _ = load_checkpoint(args.resume, template)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    trace_path = Path(args.trace) if args.trace else out.with_suffix(".losses.csv")
    with open(trace_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["iteration", "l_sdf", "l_rgb",
                                                "l_reg", "l_adv"])
        writer.writeheader()
        result = train(template, scans, cfg.train,
                       checkpoint_sink=lambda st: save_checkpoint(out, st, template),
                       resume_state=resume_state,
                       trace_sink=lambda row: (writer.writerow(row), fh.flush()))
    save_checkpoint(out, result.state, template)
    last = result.trace[-1] if result.trace else {}
    print(f"trained {result.state.iteration} iterations; "
          f"final l_sdf={last.get('l_sdf', float('nan')):.5f}; "
          f"checkpoint {out}; losses {trace_path}")
    return EXIT_OK


def cmd_sample(args) -> int:
    import warnings

    cfg = _load_run_config(args.config)
    template = build_template(cfg)
    state, ckpt_hash = load_checkpoint(args.ckpt, template)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        pca_s = pca_fit(state.dict_s, cfg.train.pca_dim_geometry)
        pca_c = pca_fit(state.dict_c, cfg.train.pca_dim_texture)
    avatar = init_avatar_from_sample(pca_s, pca_c, args.seed, template)
    save_avatar(args.out, avatar, ckpt_hash)
    print(f"sampled avatar -> {args.out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    cfg = _load_run_config(args.config)
    template = build_template(cfg)
    state, ckpt_hash = load_checkpoint(args.ckpt, template)
    mesh = load_mesh(args.scan)
    pose = _load_pose(args.pose, template) if args.pose \
        else PoseParams.identity(template.num_joints, template.num_blendshapes)
    scan = Scan(mesh=mesh, pose=pose, subject_id=0)

    before = (decoder_hash(state.phi), decoder_hash(state.psi))
    result = fit_codebook(scan, state.dict_s, state.dict_c, state.phi, state.psi,
                          template, cfg.train,
                          geom_iters=args.geom_iters if args.geom_iters is not None
                          else cfg.fit.geom_iters,
                          tex_iters=args.tex_iters if args.tex_iters is not None
                          else cfg.fit.tex_iters)
    after = (decoder_hash(state.phi), decoder_hash(state.psi))
    if before != after:
        raise NumericAbort("decoder weights changed during fitting")
    save_avatar(args.out, result.avatar, ckpt_hash)
    last = result.trace[-1]
    print(f"fitted avatar -> {args.out} (final l_rgb={last['l_rgb']:.5f})")
    return EXIT_OK


def cmd_swap(args) -> int:
    cfg = _load_run_config(args.config)
    template = build_template(cfg)
    _, ckpt_hash = load_checkpoint(args.ckpt, template)
    dst = load_avatar(args.dst, template, ckpt_hash).avatar
    src = load_avatar(args.src, template, ckpt_hash).avatar
    vertex_set = _read_vertex_set(args.vertices)
    kinds = tuple(k.strip() for k in args.kinds.split(",") if k.strip())
    out = transfer_region(dst, src, vertex_set, kinds)
    save_avatar(args.out, out, ckpt_hash)
    print(f"swapped {vertex_set.size} vertex rows ({args.kinds}) -> {args.out}")
    return EXIT_OK


def cmd_paint(args) -> int:
    cfg = _load_run_config(args.config)
    template = build_template(cfg)
    state, ckpt_hash = load_checkpoint(args.ckpt, template)
    avatar = load_avatar(args.avatar, template, ckpt_hash).avatar
    image = _load_image(args.image)
    mask = _load_image(args.mask).max(axis=2) > 0.5
    camera = _load_camera(args.camera)
    target = load_mesh(args.target)
    paint = PaintInput(image=image, mask=mask, camera=camera, target_mesh=target)
    before = decoder_hash(state.psi)
    out = paint_texture(avatar, paint, state.psi, cfg.train, iters=args.iters)
    if decoder_hash(state.psi) != before:
        raise NumericAbort("decoder weights changed during painting")
    save_avatar(args.out, out, ckpt_hash)
    print(f"painted {int(mask.sum())} masked pixels -> {args.out}")
    return EXIT_OK


def cmd_repose(args) -> int:
    cfg = _load_run_config(args.config)
    template = build_template(cfg)
    _, ckpt_hash = load_checkpoint(args.ckpt, template)
    avatar = load_avatar(args.avatar, template, ckpt_hash).avatar
    pose = _load_pose(args.pose, template)
    out = repose(avatar, pose)
    save_avatar(args.out, out, ckpt_hash)
    print(f"reposed avatar -> {args.out}")
    return EXIT_OK


def cmd_extract(args) -> int:
    cfg = _load_run_config(args.config)
    template = build_template(cfg)
    state, ckpt_hash = load_checkpoint(args.ckpt, template)
    avatar = load_avatar(args.avatar, template, ckpt_hash).avatar
    mesh = extract_mesh(avatar, state.phi, state.psi, resolution=args.res)
    if mesh.num_faces == 0:
        raise MeshError("extracted surface is empty (no sign change in the grid)")
    save_mesh(mesh, args.out)
    print(f"extracted {mesh.num_vertices} vertices / {mesh.num_faces} faces -> {args.out}")
    return EXIT_OK


def cmd_render(args) -> int:
    from ..mesher import render_turntable

    cfg = _load_run_config(args.config)
    template = build_template(cfg)
    state, ckpt_hash = load_checkpoint(args.ckpt, template)
    avatar = load_avatar(args.avatar, template, ckpt_hash).avatar
    sdf_fn, color_fn = field_closures(avatar, state.phi, state.psi)
    posed = avatar.posed_mesh()
    lo, hi = posed.bounds()
    pad = 0.12 * float(np.linalg.norm(hi - lo))
    center = posed.joints[0] if posed.joints is not None else 0.5 * (lo + hi)
    paths = render_turntable(sdf_fn, color_fn, center, radius=cfg.render.radius,
                             n_views=args.views, resolution=args.size,
                             out_dir=args.out, bbox=(lo - pad, hi + pad),
                             ray_steps=cfg.render.ray_steps)
    print(f"rendered {len(paths)} images to {args.out}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cbav",
                                description="locally editable codebook avatars")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, **kwargs):
        sp = sub.add_parser(name, **kwargs)
        sp.set_defaults(fn=fn)
        sp.add_argument("--config", help="TOML run configuration")
        return sp

    sp = add("synth", cmd_synth, help="write synthetic scans")
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, help="train dictionaries and decoders")
    sp.add_argument("--scans", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("--trace", help="loss CSV path (default: <out>.losses.csv)")

    sp = add("sample", cmd_sample, help="draw a random avatar")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = add("fit", cmd_fit, help="invert a scan into a codebook")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--scan", required=True)
    sp.add_argument("--pose", help="pose sidecar JSON (identity if omitted)")
    sp.add_argument("--geom-iters", type=int, dest="geom_iters")
    sp.add_argument("--tex-iters", type=int, dest="tex_iters")
    sp.add_argument("--out", required=True)

    sp = add("swap", cmd_swap, help="transfer codebook rows between avatars")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--dst", required=True)
    sp.add_argument("--src", required=True)
    sp.add_argument("--vertices", required=True, help="newline-delimited indices")
    sp.add_argument("--kinds", default="geometry,texture")
    sp.add_argument("--out", required=True)

    sp = add("paint", cmd_paint, help="fit texture features to a painted image")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--avatar", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--mask", required=True)
    sp.add_argument("--camera", required=True, help="camera description JSON")
    sp.add_argument("--target", required=True, help="mesh the image was rasterized from")
    sp.add_argument("--iters", type=int, default=300)
    sp.add_argument("--out", required=True)

    sp = add("repose", cmd_repose, help="change the avatar pose")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--avatar", required=True)
    sp.add_argument("--pose", required=True)
    sp.add_argument("--out", required=True)

    sp = add("extract", cmd_extract, help="marching-cubes mesh export")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--avatar", required=True)
    sp.add_argument("--res", type=int, default=64)
    sp.add_argument("--out", required=True)

    sp = add("render", cmd_render, help="turntable renders")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--avatar", required=True)
    sp.add_argument("--views", type=int, default=4)
    sp.add_argument("--size", type=int, default=192)
    sp.add_argument("--out", required=True)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericAbort as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except _DATA_ERRORS as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
