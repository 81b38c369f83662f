"""Command-line pipeline over the library.

Subcommands:
  synth         render a synthetic stereo dataset with ground truth
  loss          evaluate the training objective on dataset frames
  recover-pose  recover relative poses photometrically, emit a trajectory
  fuse          fuse depth (+labels) into a TSDF volume and export a mesh
  eval-ate      absolute trajectory error between two trajectory files

Every subcommand reads an optional JSON config (--config); explicit CLI
flags override config values, which override built-in defaults. Outputs
are deterministic given identical inputs and seeds: reports carry no
timestamps or absolute paths, and mesh/volume files are written with
fixed binary layouts.

On failure a machine-readable JSON object {"error", "code", "message"}
goes to stderr and the process exits with the error's code (2 missing
input, 3 malformed config/file, 4 dimension mismatch, 5 domain error).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import oracle, warp
from .camera import Intrinsics, StereoRig, intrinsics_from_fov
from .errors import (
    DimensionMismatchError,
    FormatError,
    MissingInputError,
    ScopemapError,
)
from .losses import LossConfig, total_loss
from .mesh import export_ply, marching_cubes
from .optimizer import OptimizerConfig, recover_pose
from .pose import PoseSE3, Trajectory, ate, compose, invert, load_trajectory, relative, save_trajectory
from .raster import (
    load_depth_png,
    load_image_png,
    load_labels_png,
    save_depth_png,
    save_image_png,
    save_labels_png,
)
from .tsdf import FusionChunk, VolumeParams, fuse_chunk, regularize_tv_l1, save_volume

DEFAULT_CONFIG = {
    "seed": 0,
    "camera": {"fov_degrees": 87.5, "width": 256, "height": 256, "baseline_mm": 1.52},
    "scene": {"kind": "two", "texture_amplitude": 0.45},
    "trajectory": {"kind": "orbit", "frames": 8, "sweep_mm": 4.0, "radius_mm": 150.0,
                   "center": [0.0, 0.0, 0.0], "fps": 25.0},
    "fusion": {"voxel_size_mm": 1.0, "truncation_mm": 4.0, "tv_lambda": None,
               "tv_iters": 200, "with_labels": True},
    "losses": {},
    "optimizer": {},
}


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: str | None) -> dict:
    if path is None:
        return dict(DEFAULT_CONFIG)
    if not os.path.exists(path):
        raise MissingInputError(f"config file not found: {path}")
    try:
        with open(path) as f:
            user = json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(user, dict):
        raise FormatError(f"{path}: config must be a JSON object")
    return _merge(DEFAULT_CONFIG, user)


def _rig_from_config(cam: dict) -> StereoRig:
    try:
        if "fx" in cam:
            intrinsics = Intrinsics(
                fx=float(cam["fx"]),
                fy=float(cam.get("fy", cam["fx"])),
                cx=float(cam["cx"]),
                cy=float(cam["cy"]),
                width=int(cam["width"]),
                height=int(cam["height"]),
            )
        else:
            intrinsics = intrinsics_from_fov(
                float(cam["fov_degrees"]), int(cam["width"]), int(cam["height"])
            )
    except KeyError as e:
        raise FormatError(f"camera config missing key: {e}") from e
    return StereoRig(intrinsics=intrinsics, baseline=float(cam.get("baseline_mm", 1.52)))


def _loss_config(cfg: dict) -> LossConfig:
    fields = cfg.get("losses", {})
    try:
        return LossConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in fields.items()})
    except TypeError as e:
        raise FormatError(f"bad losses config: {e}") from e


def _optimizer_config(cfg: dict) -> OptimizerConfig:
    fields = cfg.get("optimizer", {})
    try:
        return OptimizerConfig(**fields)
    except TypeError as e:
        raise FormatError(f"bad optimizer config: {e}") from e


def _trajectory_from_config(cfg: dict) -> Trajectory:
    tr = cfg["trajectory"]
    kind = tr.get("kind", "orbit")
    n = int(tr.get("frames", 8))
    if kind == "orbit":
        return oracle.orbit_trajectory(
            n, float(tr.get("sweep_mm", 4.0)), seed=int(cfg.get("seed", 0)),
            fps=float(tr.get("fps", 25.0)),
        )
    if kind == "scan":
        return oracle.scan_trajectory(
            tuple(tr.get("center", (0.0, 0.0, 0.0))),
            float(tr.get("radius_mm", 150.0)),
            n,
            fps=float(tr.get("fps", 25.0)),
        )
    raise FormatError(f"unknown trajectory kind: {kind!r}")


def _write_json(obj: dict, path: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path is None:
        print(text)
    else:
        with open(path, "w") as f:
            f.write(text + "\n")


# ---------------------------------------------------------------------------
# Dataset layout helpers

MANIFEST_NAME = "manifest.json"


def _frame_name(kind: str, i: int) -> str:
    return f"{kind}_{i:04d}.png"


def write_dataset(out_dir: str, cfg: dict) -> dict:
    rig = _rig_from_config(cfg["camera"])
    scene_cfg = cfg["scene"]
    scene = oracle.demo_scene(
        scene_cfg.get("kind", "two"),
        seed=int(cfg.get("seed", 0)),
        texture_amplitude=float(scene_cfg.get("texture_amplitude", 0.45)),
    )
    traj = _trajectory_from_config(cfg)
    os.makedirs(out_dir, exist_ok=True)
    for i, pose in enumerate(traj.poses):
        left, right, depth, labels = oracle.render(scene, pose, rig)
        save_image_png(left, os.path.join(out_dir, _frame_name("left", i)))
        save_image_png(right, os.path.join(out_dir, _frame_name("right", i)))
        save_depth_png(depth, os.path.join(out_dir, _frame_name("depth", i)))
        save_labels_png(labels, os.path.join(out_dir, _frame_name("labels", i)))
    save_trajectory(traj, os.path.join(out_dir, "traj_gt.txt"))
    manifest = {
        "frames": len(traj),
        "camera": cfg["camera"],
        "scene": scene_cfg,
        "seed": int(cfg.get("seed", 0)),
        "trajectory_file": "traj_gt.txt",
        "patterns": {
            "left": "left_%04d.png",
            "right": "right_%04d.png",
            "depth": "depth_%04d.png",
            "labels": "labels_%04d.png",
        },
    }
    _write_json(manifest, os.path.join(out_dir, MANIFEST_NAME))
    return manifest


def read_manifest(dataset: str) -> dict:
    path = os.path.join(dataset, MANIFEST_NAME)
    if not os.path.exists(path):
        raise MissingInputError(f"dataset manifest not found: {path}")
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON") from e


def _dataset_frame(dataset: str, manifest: dict, i: int, what: str):
    pattern = manifest["patterns"][what]
    path = os.path.join(dataset, pattern % i)
    loaders = {"left": load_image_png, "right": load_image_png,
               "depth": load_depth_png, "labels": load_labels_png}
    return loaders[what](path)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.frames is not None:
        cfg["trajectory"]["frames"] = args.frames
    write_dataset(args.out, cfg)
    return 0


def cmd_loss(args) -> int:
    cfg = load_config(args.config)
    manifest = read_manifest(args.dataset)
    rig = _rig_from_config(manifest.get("camera", cfg["camera"]))
    loss_cfg = _loss_config(cfg)
    traj = load_trajectory(os.path.join(args.dataset, manifest["trajectory_file"]))

    t = args.frame
    if t + 1 >= manifest["frames"]:
        raise DimensionMismatchError(
            f"frame {t} has no successor in a {manifest['frames']}-frame dataset"
        )
    target = _dataset_frame(args.dataset, manifest, t, "left")
    depth = _dataset_frame(args.dataset, manifest, t, "depth")
    source_next = _dataset_frame(args.dataset, manifest, t + 1, "left")
    source_right = _dataset_frame(args.dataset, manifest, t, "right")

    pose_next = relative(traj.poses[t + 1], traj.poses[t])
    sources = [source_next, source_right]
    poses = [pose_next, warp.stereo_pose(rig)]
    value, diag = total_loss(
        target, sources, depth, poses, rig.intrinsics, loss_cfg,
        pose_gt=pose_next, pose_pred=pose_next,
    )
    report = {
        "frame": t,
        "total": value,
        "self_supervised": diag["self_supervised"],
        "photometric": diag["photometric"],
        "smoothness": diag["smoothness"],
        "smoothness_weighted": diag["smoothness_weighted"],
        "pose": diag["pose"],
        "pose_breakdown": diag.get("pose_breakdown", {}),
        "surviving_fraction": diag["surviving_fraction"],
    }
    _write_json(report, args.out)
    return 0


def cmd_recover_pose(args) -> int:
    cfg = load_config(args.config)
    manifest = read_manifest(args.dataset)
    rig = _rig_from_config(manifest.get("camera", cfg["camera"]))
    loss_cfg = _loss_config(cfg)
    opt_cfg = _optimizer_config(cfg)
    traj = load_trajectory(os.path.join(args.dataset, manifest["trajectory_file"]))

    first, last = args.start, args.end if args.end is not None else manifest["frames"] - 1
    if not (0 <= first < last < manifest["frames"]):
        raise DimensionMismatchError(
            f"frame range {first}..{last} invalid for {manifest['frames']} frames"
        )

    rng = np.random.default_rng(args.perturb_seed)
    est_poses = [traj.poses[first]]
    frame_reports = []
    for t in range(first, last):
        target = _dataset_frame(args.dataset, manifest, t, "left")
        depth = _dataset_frame(args.dataset, manifest, t, "depth")
        source = _dataset_frame(args.dataset, manifest, t + 1, "left")
        true_rel = relative(traj.poses[t + 1], traj.poses[t])
        if args.perturb_rot_deg or args.perturb_trl_mm:
            d_rot = np.radians(rng.uniform(-args.perturb_rot_deg, args.perturb_rot_deg, 3))
            d_trl = rng.uniform(-args.perturb_trl_mm, args.perturb_trl_mm, 3)
            init = PoseSE3(rot=tuple(np.array(true_rel.rot) + d_rot),
                           trl=tuple(np.array(true_rel.trl) + d_trl))
        else:
            init = PoseSE3.identity()
        result = recover_pose(target, [source], depth, rig.intrinsics, init, loss_cfg, opt_cfg)
        # chain: pose_{t+1} = pose_t . inv(rel) with rel the t->t+1 point
        # transform (world-to-world it acts inverted)
        est_poses.append(compose(est_poses[-1], invert(result.pose)))
        frame_reports.append(
            {
                "frame": t,
                "loss": result.loss,
                "iterations": result.iterations,
                "converged": result.converged,
                "reason": result.reason,
                "trace": list(result.trace),
            }
        )

    est = Trajectory(timestamps=traj.timestamps[first : last + 1], poses=tuple(est_poses))
    save_trajectory(est, args.traj_out)
    gt_sub = Trajectory(
        timestamps=traj.timestamps[first : last + 1], poses=traj.poses[first : last + 1]
    )
    report = {
        "frames": frame_reports,
        "ate_vs_groundtruth": ate(gt_sub, est, align=False).to_dict(),
    }
    _write_json(report, args.out)
    return 0


def cmd_fuse(args) -> int:
    cfg = load_config(args.config)
    manifest = read_manifest(args.dataset)
    rig = _rig_from_config(manifest.get("camera", cfg["camera"]))
    fusion = dict(cfg["fusion"])
    if args.voxel_size is not None:
        fusion["voxel_size_mm"] = args.voxel_size
    if args.truncation is not None:
        fusion["truncation_mm"] = args.truncation
    if args.tv_lambda is not None:
        fusion["tv_lambda"] = args.tv_lambda
    if args.tv_iters is not None:
        fusion["tv_iters"] = args.tv_iters
    if args.no_labels:
        fusion["with_labels"] = False

    traj_path = args.traj or os.path.join(args.dataset, manifest["trajectory_file"])
    traj = load_trajectory(traj_path)
    n = manifest["frames"]
    if len(traj) != n:
        raise DimensionMismatchError(
            f"trajectory has {len(traj)} poses but dataset has {n} frames"
        )

    with_labels = bool(fusion.get("with_labels", True))
    frames = []
    for i in range(n):
        depth = _dataset_frame(args.dataset, manifest, i, "depth")
        labels = _dataset_frame(args.dataset, manifest, i, "labels") if with_labels else None
        frames.append((depth, labels, traj.poses[i]))
    chunk = FusionChunk(frames=tuple(frames))
    params = VolumeParams(
        voxel_size=float(fusion["voxel_size_mm"]), truncation=float(fusion["truncation_mm"])
    )
    vol = fuse_chunk(chunk, params, rig.intrinsics)

    tv_energy = None
    if fusion.get("tv_lambda"):
        vol, tv_report = regularize_tv_l1(
            vol, float(fusion["tv_lambda"]), int(fusion.get("tv_iters", 200))
        )
        tv_energy = [tv_report.energies[0], tv_report.energies[-1]]

    mesh = marching_cubes(vol)
    os.makedirs(args.out, exist_ok=True)
    save_volume(vol, os.path.join(args.out, "volume.tsdf"))
    export_ply(mesh, os.path.join(args.out, "mesh.ply"), binary=not args.ascii)
    report = {
        "frames_fused": chunk.n,
        "volume": {
            "dims": list(vol.dims),
            "voxel_size_mm": vol.voxel_size,
            "truncation_mm": vol.truncation,
            "observed_voxels": int(vol.observed().sum()),
        },
        "tv_energy": tv_energy,
        "mesh": {"vertices": mesh.n_vertices, "triangles": mesh.n_triangles},
        "files": {"volume": "volume.tsdf", "mesh": "mesh.ply"},
    }
    _write_json(report, os.path.join(args.out, "fuse_report.json"))
    return 0


def cmd_eval_ate(args) -> int:
    gt = load_trajectory(args.gt)
    est = load_trajectory(args.est)
    report = ate(gt, est, align=args.align)
    _write_json(report.to_dict(), args.out)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scopemap", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="render a synthetic dataset")
    sp.add_argument("--config", default=None)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--frames", type=int, default=None)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("loss", help="evaluate the objective on a frame")
    sp.add_argument("--config", default=None)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--frame", type=int, default=0)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_loss)

    sp = sub.add_parser("recover-pose", help="photometric pose recovery")
    sp.add_argument("--config", default=None)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--start", type=int, default=0)
    sp.add_argument("--end", type=int, default=None)
    sp.add_argument("--perturb-rot-deg", type=float, default=0.0)
    sp.add_argument("--perturb-trl-mm", type=float, default=0.0)
    sp.add_argument("--perturb-seed", type=int, default=0)
    sp.add_argument("--traj-out", required=True)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_recover_pose)

    sp = sub.add_parser("fuse", help="TSDF fusion and mesh export")
    sp.add_argument("--config", default=None)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--traj", default=None)
    sp.add_argument("--voxel-size", type=float, default=None)
    sp.add_argument("--truncation", type=float, default=None)
    sp.add_argument("--tv-lambda", type=float, default=None)
    sp.add_argument("--tv-iters", type=int, default=None)
    sp.add_argument("--no-labels", action="store_true")
    sp.add_argument("--ascii", action="store_true", help="write ASCII PLY")
    sp.set_defaults(func=cmd_fuse)

    sp = sub.add_parser("eval-ate", help="absolute trajectory error")
    sp.add_argument("gt")
    sp.add_argument("est")
    sp.add_argument("--align", action="store_true")
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_eval_ate)

    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ScopemapError as e:
        payload = {"error": type(e).__name__, "code": e.exit_code, "message": str(e)}
        print(json.dumps(payload), file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
