"""Command-line entry points: synthesize, solve, evaluate, export.

Each subcommand reads and writes self-contained directories so any step
can be inspected or re-run in isolation:

  flowsfm synth      --out scene/           [scene flags]
  flowsfm solve      --scene scene/ --out run/  [config flags]
  flowsfm eval       --run run/ --scene scene/  [--out metrics.json]
  flowsfm export-ply --run run/ --out cloud.ply [--stride N]

A run directory holds ``config.json``, ``est_trajectory.txt``
(camera-to-world), ``loss.csv``, per-frame ``depth_*.pfm``, a fused
``cloud.ply``, ``metrics.json``, and ``run_info.json``. ``metrics.json``
contains only deterministic values (byte-identical across repeated runs
with the same seed); wall-clock timings live in ``run_info.json``.

Exit codes: 0 on success, 2 on geometrically degenerate input, 1 on any
other failure (divergence aborts print their diagnostic snapshot).
"""

from __future__ import annotations

import argparse
import json
import platform
import sys
import time
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

import flowsfm
from flowsfm import evalio, geometry, loss, optimizer, synthworld
from flowsfm.diffcore import kernels
from flowsfm.errors import DegenerateInputError, OptimizerDivergedError
from flowsfm.geometry import Intrinsics, PoseSE3
from flowsfm.optimizer import ABLATIONS, SolveConfig
from flowsfm.synthworld import SCENE_KINDS, NoiseSpec, SceneSpec

__all__ = ["main"]


# ---------------------------------------------------------------------------
# shared helpers

def _read_depth_stack(src: Path, n_frames: int) -> np.ndarray:
    return np.stack([evalio.read_pfm(src / f"depth_{i:04d}.pfm")
                     for i in range(n_frames)])


def _load_w2c(path) -> list[PoseSE3]:
    return [p.invert() for p in geometry.load_trajectory(path)]


def _epe_mean(scene: synthworld.Scene, depths: np.ndarray,
              poses: list[PoseSE3], focal: float) -> float:
    """Mean endpoint error of the camera-induced flow against the scene's
    observed flow, in width units, over observed and positively-projected
    pixels."""
    k = Intrinsics.centered(focal, scene.spec.width, scene.spec.height)
    uv = geometry.pixel_grid(scene.spec.width, scene.spec.height).reshape(-1, 2)
    total, count = 0.0, 0
    for i, fl in enumerate(scene.flows):
        rel = poses[i].invert().compose(poses[i + 1])
        induced, valid = loss.induced_correspondence(uv, depths[i].reshape(-1), k, rel)
        ok = fl.mask.reshape(-1) & valid
        target = uv[ok] + fl.flow.reshape(-1, 2)[ok]
        total += float(np.linalg.norm(induced[ok] - target, axis=-1).sum())
        count += int(ok.sum())
    if count == 0:
        raise DegenerateInputError("epe: no observed flow correspondences")
    return total / count


def _metrics(scene: synthworld.Scene, depths: np.ndarray,
             poses: list[PoseSE3], focal: float) -> dict:
    est = evalio.camera_centers(poses)
    gt = evalio.camera_centers(scene.poses)
    return {
        "ate": evalio.ate(est, gt),
        "epe_mean": _epe_mean(scene, depths, poses, focal),
        "depth_si_rmse": evalio.depth_si_rmse(depths, scene.depths),
        "focal_abs_err": abs(focal - scene.spec.focal),
    }


# ---------------------------------------------------------------------------
# subcommands

def _cmd_synth(args) -> int:
    noise = NoiseSpec(args.flow_sigma, args.track_sigma, args.dropout)
    spec = SceneSpec(kind=args.kind, n_frames=args.frames, width=args.width,
                     height=args.height, focal=args.focal, seed=args.seed,
                     amplitude=args.amplitude, waves=args.waves, noise=noise,
                     track_grid=args.track_grid, track_reseed=args.track_reseed,
                     first_step_scale=args.first_step_scale)
    scene = synthworld.make_scene(spec)
    synthworld.write_scene(scene, args.out)
    print(f"wrote {scene.n_frames}-frame {spec.kind} scene "
          f"({spec.width}x{spec.height}, focal {spec.focal}) to {args.out}")
    return 0


def _config_from_args(args) -> SolveConfig:
    cfg = SolveConfig.load(args.config) if args.config else SolveConfig()
    overrides = {f.name: getattr(args, f.name) for f in fields(SolveConfig)
                 if getattr(args, f.name) is not None}
    return replace(cfg, **overrides) if overrides else cfg


def _cmd_solve(args) -> int:
    cfg = _config_from_args(args)
    scene = synthworld.read_scene(args.scene)
    if args.subsample:
        scene, sub = synthworld.subsample_scene(scene, args.subsample)
        print(f"subsampled to frames {sub.indices.tolist()}")

    def progress(step, b):
        if args.log_every and step % args.log_every == 0:
            print(f"step {step}/{cfg.total_steps}  loss {b.total:.6e}  "
                  f"flow {b.flow:.3e}  track {b.track:.3e}  focal {b.focal:.4f}")

    t0 = time.perf_counter()
    result = optimizer.solve(scene.flows, scene.tracks, scene.spec.width,
                             scene.spec.height, cfg, gt_poses=scene.poses,
                             progress=progress)
    wall = time.perf_counter() - t0

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    geometry.save_trajectory(out / "est_trajectory.txt",
                             [p.invert() for p in result.poses])
    evalio.write_loss_csv(out / "loss.csv", result.loss_rows)
    for i, d in enumerate(result.depths):
        evalio.write_pfm(out / f"depth_{i:04d}.pfm", d)
    k = Intrinsics.centered(result.focal, scene.spec.width, scene.spec.height)
    n_pts = evalio.export_ply(out / "cloud.ply", result.depths, k, result.poses,
                              stride=args.ply_stride)
    metrics = _metrics(scene, result.depths, result.poses, result.focal)
    evalio.write_metrics(out / "metrics.json", metrics)
    steps_run = result.loss_rows[-1][0]
    evalio.write_run_info(out / "run_info.json", {
        "ablation": cfg.ablation,
        "ate_alignment": "centered, tr(XX^T)=1 scaling, rotation-only Procrustes",
        "focal": result.focal,
        "frames": len(result.poses),
        "image_size": [scene.spec.width, scene.spec.height],
        "numpy": np.__version__,
        "ply_points": n_pts,
        "python": platform.python_version(),
        "steps_run": steps_run,
        "using_compiled_kernels": kernels.using_compiled_kernels(),
        "version": flowsfm.__version__,
        "wall_clock_s": wall,
    })
    print(f"solved {len(result.poses)} frames in {steps_run} steps ({wall:.1f} s): "
          f"ate {metrics['ate']:.5f}  focal {result.focal:.4f} "
          f"(err {metrics['focal_abs_err']:.4f})  "
          f"depth_si_rmse {metrics['depth_si_rmse']:.5f}")
    return 0


def _cmd_eval(args) -> int:
    run = Path(args.run)
    scene = synthworld.read_scene(args.scene)
    poses = _load_w2c(run / "est_trajectory.txt")
    if len(poses) != scene.n_frames:
        raise DegenerateInputError(
            f"eval: run has {len(poses)} poses, scene has {scene.n_frames} frames")
    depths = _read_depth_stack(run, scene.n_frames)
    with open(run / "run_info.json") as f:
        focal = float(json.load(f)["focal"])
    metrics = _metrics(scene, depths, poses, focal)
    out = Path(args.out) if args.out else run / "metrics.json"
    evalio.write_metrics(out, metrics)
    for name in ("ate", "epe_mean", "depth_si_rmse", "focal_abs_err"):
        print(f"{name} {metrics[name]:.17g}")
    return 0


def _cmd_export_ply(args) -> int:
    if (args.run is None) == (args.scene is None):
        raise SystemExit("export-ply: give exactly one of --run or --scene")
    if args.run:
        run = Path(args.run)
        poses = _load_w2c(run / "est_trajectory.txt")
        depths = _read_depth_stack(run, len(poses))
        with open(run / "run_info.json") as f:
            info = json.load(f)
        focal = float(info["focal"])
        width, height = info["image_size"]
    else:
        scene = synthworld.read_scene(args.scene)
        poses, depths, focal = scene.poses, scene.depths, scene.spec.focal
        width, height = scene.spec.width, scene.spec.height
    if args.frames:
        sel = [int(s) for s in args.frames.split(",")]
        poses = [poses[i] for i in sel]
        depths = depths[sel]
    k = Intrinsics.centered(focal, width, height)
    n = evalio.export_ply(args.out, depths, k, poses, stride=args.stride)
    print(f"wrote {n} points to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser

def _int_or_float(annotation: str):
    return int if annotation.startswith("int") else float


def _add_solve_config_flags(p: argparse.ArgumentParser) -> None:
    # one flag per SolveConfig field, so the CLI cannot drift from the config
    for f in fields(SolveConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name == "ablation":
            p.add_argument(flag, choices=ABLATIONS, default=None,
                           help="ablation mode (default full)")
        else:
            p.add_argument(flag, type=_int_or_float(f.type), default=None,
                           help=f"override config key {f.name}")


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="flowsfm",
        description="gradient-based structure from motion on precomputed "
                    "correspondences")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene directory")
    p.add_argument("--out", required=True, help="output scene directory")
    p.add_argument("--kind", choices=SCENE_KINDS, default="orbit")
    p.add_argument("--frames", type=int, default=12)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=48)
    p.add_argument("--focal", type=float, default=1.2,
                   help="ground-truth focal length in width units")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--amplitude", type=float, default=0.25)
    p.add_argument("--waves", type=int, default=8)
    p.add_argument("--flow-sigma", type=float, default=0.0,
                   help="flow noise sigma in width units")
    p.add_argument("--track-sigma", type=float, default=0.0)
    p.add_argument("--dropout", type=float, default=0.0,
                   help="fraction of flow pixels marked unobserved")
    p.add_argument("--track-grid", type=int, default=16)
    p.add_argument("--track-reseed", type=int, default=10)
    p.add_argument("--first-step-scale", type=float, default=1.0,
                   help="orbit only: scale the first frame step "
                        "(<1 makes the first pair near-degenerate)")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("solve", help="run the two-stage optimization on a scene")
    p.add_argument("--scene", required=True, help="scene directory from synth")
    p.add_argument("--out", required=True, help="run directory to write")
    p.add_argument("--config", default=None, help="SolveConfig JSON file")
    p.add_argument("--subsample", type=int, default=0,
                   help="flow-balanced subsample to this many frames")
    p.add_argument("--log-every", type=int, default=100,
                   help="progress print interval in steps (0 silences)")
    p.add_argument("--ply-stride", type=int, default=2,
                   help="pixel stride of the exported point cloud")
    _add_solve_config_flags(p)
    p.set_defaults(func=_cmd_solve)

    p = sub.add_parser("eval", help="recompute metrics for a run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", default=None,
                   help="metrics JSON path (default RUN/metrics.json)")
    p.add_argument("--seed", type=int, default=0,
                   help="accepted for interface uniformity; eval is deterministic")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("export-ply", help="fuse depths into a world point cloud")
    p.add_argument("--run", default=None, help="run directory (estimated)")
    p.add_argument("--scene", default=None, help="scene directory (ground truth)")
    p.add_argument("--out", required=True, help="output .ply path")
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--frames", default=None,
                   help="comma-separated frame subset, e.g. 0,3,7")
    p.add_argument("--seed", type=int, default=0,
                   help="accepted for interface uniformity; export is deterministic")
    p.set_defaults(func=_cmd_export_ply)
    return ap


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DegenerateInputError as exc:
        print(f"degenerate input: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OptimizerDivergedError as exc:
        print(f"optimization diverged: {exc}", file=sys.stderr)
        json.dump(exc.diagnostic, sys.stderr, indent=2, default=str)
        sys.stderr.write("\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
