"""Command-line entry point.

Subcommands: `run` (full pipeline on a TUM-layout dataset), `synth`
(generate a synthetic dataset), `eval` (trajectory + image metrics),
`render` (novel view/time from a checkpoint), `selftest` (built-in oracle
and property checks, no external data).

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .camera import CameraPose, Intrinsics
from .config import RunConfig, dump_config, load_config, scene_spec_from_config
from .dataset import (
    SequenceSource,
    associate,
    load_color_png,
    load_frame,
    load_trajectory_file,
    save_color_png,
    trajectory_entry_to_pose,
)
from .errors import (
    CheckpointFormatError,
    ConfigError,
    DataError,
    DegenerateTemporalExtentError,
    InvalidParameterError,
    ProviderError,
    SceneSpecError,
    TrackingDegenerateError,
)
from .info import FileTrackProvider, OracleTrackProvider
from .metrics import TrajectoryPair, ate_rmse, psnr, ssim
from .pipeline import FrameObservation, load_checkpoint, run_sequence
from .renderer import render
from .simulator import generate, write_tum_sequence

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _load_run_config(path) -> RunConfig:
    if path:
        return load_config(path)
    return RunConfig()


def _read_intrinsics_file(path) -> Intrinsics:
    vals = path.read_text().split()
    if len(vals) != 6:
        raise DataError(f"{path}: expected 'fx fy cx cy width height'")
    fx, fy, cx, cy = map(float, vals[:4])
    w, h = int(vals[4]), int(vals[5])
    return Intrinsics(fx, fy, cx, cy, w, h)


def _write_intrinsics_file(path, intr: Intrinsics):
    path.write_text(f"{intr.fx:.9g} {intr.fy:.9g} {intr.cx:.9g} {intr.cy:.9g} "
                    f"{intr.width} {intr.height}\n")


def cmd_synth(args) -> int:
    cfg = _load_run_config(args.spec)
    spec = scene_spec_from_config(cfg)
    frames = generate(spec)
    out = Path(args.output)
    write_tum_sequence(frames, out)
    _write_intrinsics_file(out / "intrinsics.txt", spec.intrinsics())
    (out / "scene_spec.txt").write_text(dump_config(cfg))
    print(f"wrote {len(frames)} frames at {spec.width}x{spec.height} to {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load_run_config(args.config)
    root = Path(args.input)
    source = SequenceSource.from_tum_dir(
        root, depth_scale=cfg.dataset.depth_scale,
        association_tolerance=cfg.dataset.association_tolerance)
    matched = associate(source)
    intr_path = root / "intrinsics.txt"
    if not intr_path.exists():
        raise DataError(f"missing {intr_path}; the pipeline needs camera intrinsics")
    intrinsics = _read_intrinsics_file(intr_path)

    frames = []
    for i, m in enumerate(matched):
        rgb, depth = load_frame(m, cfg.dataset.depth_scale)
        if rgb.shape[0] != intrinsics.height or rgb.shape[1] != intrinsics.width:
            raise DataError(f"frame {i} resolution {rgb.shape[:2]} does not match intrinsics")
        frames.append(FrameObservation(index=i, timestamp=m.timestamp, rgb=rgb, depth=depth))

    if cfg.provider.kind == "oracle":
        spec_path = root / "scene_spec.txt"
        if not spec_path.exists():
            raise DataError(
                f"provider.kind = oracle needs {spec_path} (synthetic datasets only); "
                "use provider.kind = file with an external track file otherwise")
        scene_cfg = load_config(spec_path)
        sim_frames = generate(scene_spec_from_config(scene_cfg))
        provider = OracleTrackProvider(
            sim_frames, intrinsics,
            pixel_sigma=scene_cfg.scene.track_sigma,
            label_flip=scene_cfg.scene.label_flip,
            seed=scene_cfg.scene.seed)
    else:
        track_path = Path(cfg.provider.track_file)
        if not track_path.is_absolute():
            track_path = root / track_path
        provider = FileTrackProvider(track_path)

    manifest = run_sequence(cfg, intrinsics, frames, provider, args.output,
                            mode=args.mode, seed=args.seed, threads=args.threads,
                            preview_every=args.preview_every, input_path=str(root))
    print(f"processed {len(frames)} frames, {manifest.metrics['n_keyframes']} keyframes, "
          f"map size {manifest.map_size}, {manifest.runtime_s:.1f}s")
    print(f"mean train-view PSNR {manifest.metrics['train_psnr_mean']:.2f} dB")
    return EXIT_OK


def cmd_eval(args) -> int:
    est = load_trajectory_file(args.trajectory)
    gt = load_trajectory_file(args.groundtruth)
    pair = TrajectoryPair.from_timestamped(est, gt, tolerance=args.tolerance)
    ate_cm = ate_rmse(pair, align=True)

    psnrs = []
    ssims = []
    n_frames = 0
    if args.renders and args.gt_frames:
        rdir = Path(args.renders)
        gdir = Path(args.gt_frames)
        names = sorted(p.name for p in rdir.glob("*.png") if not p.stem.endswith("_depth"))
        gt_names = {p.name for p in gdir.glob("*.png")}
        missing = [n for n in names if n not in gt_names]
        if missing or not names:
            raise DataError(
                f"render/ground-truth frame mismatch: {len(names)} renders, "
                f"{len(missing)} without a matching ground-truth frame")
        for name in names:
            a = load_color_png(rdir / name)
            b = load_color_png(gdir / name)
            if a.shape != b.shape:
                raise DataError(f"resolution mismatch for {name}")
            psnrs.append(psnr(a, b))
            ssims.append(ssim(a, b))
        n_frames = len(names)

    runtime = ""
    manifest_path = Path(args.trajectory).parent / "manifest.json"
    if manifest_path.exists():
        import json

        runtime = f"{json.loads(manifest_path.read_text()).get('runtime_s', '')}"

    name = args.name or Path(args.trajectory).resolve().parent.name
    header = "sequence,ate_cm,psnr_db,ssim,frames,runtime_s"
    row = f"{name},{ate_cm:.4f}"
    row += f",{np.mean(psnrs):.4f}" if psnrs else ","
    row += f",{np.mean(ssims):.6f}" if ssims else ","
    row += f",{n_frames},{runtime}"
    print(header)
    print(row)
    if args.out:
        out = Path(args.out)
        out.write_text(header + "\n" + row + "\n")
        if psnrs:
            breakdown = out.with_suffix(".frames.csv")
            lines = ["frame,psnr_db,ssim"]
            for i, (p, s) in enumerate(zip(psnrs, ssims)):
                lines.append(f"{i},{p:.4f},{s:.6f}")
            breakdown.write_text("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_render(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    if args.keyframe_index is not None:
        match = [e for e in ck.keyframe_poses if e[0] == args.keyframe_index]
        if not match:
            raise DataError(f"checkpoint has no keyframe {args.keyframe_index}")
        _, kf_ts, pose = match[0]
        t = args.time if args.time is not None else kf_ts
    elif args.pose:
        vals = [float(v) for v in args.pose.split()]
        if len(vals) != 7:
            raise ConfigError("--pose needs 7 values: tx ty tz qx qy qz qw")
        if not ck.keyframe_poses:
            raise DataError("checkpoint has no keyframes to take intrinsics from")
        intr = ck.keyframe_poses[0][2].intrinsics
        qx, qy, qz, qw = vals[3:7]
        pose = trajectory_entry_to_pose(np.array(vals[:3]), np.array([qw, qx, qy, qz]), intr)
        if args.time is None:
            raise ConfigError("--time is required with --pose")
        t = args.time
    else:
        raise ConfigError("render needs --keyframe-index or --pose")

    fr = render(ck.gmap, pose, t, time_invariant=(ck.mode == "static3d"),
                threads=args.threads)
    save_color_png(args.out, fr.color)
    print(f"rendered {len(ck.gmap)} splats at t={t:.3f} -> {args.out}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from . import selftest

    return selftest.run_all(verbose=True)


def build_parser():
    p = argparse.ArgumentParser(prog="splat4d",
                                description="RGB-D SLAM over a space-time Gaussian map")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="track and map an RGB-D sequence")
    run.add_argument("input", help="dataset directory (TUM layout)")
    run.add_argument("--config", default=None, help="run configuration file")
    run.add_argument("--output", required=True, help="output directory")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--threads", type=int, default=1,
                     help="renderer worker threads; 1 guarantees bit-reproducibility")
    run.add_argument("--mode", choices=["full", "static3d", "nofilter"], default="full")
    run.add_argument("--preview-every", type=int, default=10)
    run.set_defaults(fn=cmd_run)

    synth = sub.add_parser("synth", help="generate a synthetic RGB-D dataset")
    synth.add_argument("--spec", default=None, help="scene spec file (scene.* keys)")
    synth.add_argument("--output", required=True)
    synth.set_defaults(fn=cmd_synth)

    ev = sub.add_parser("eval", help="trajectory and rendering metrics")
    ev.add_argument("--trajectory", required=True)
    ev.add_argument("--groundtruth", required=True)
    ev.add_argument("--renders", default=None)
    ev.add_argument("--gt-frames", default=None)
    ev.add_argument("--tolerance", type=float, default=0.02)
    ev.add_argument("--name", default=None)
    ev.add_argument("--out", default=None, help="CSV report path")
    ev.set_defaults(fn=cmd_eval)

    rd = sub.add_parser("render", help="render a checkpoint at a pose and time")
    rd.add_argument("--checkpoint", required=True)
    rd.add_argument("--time", type=float, default=None)
    rd.add_argument("--keyframe-index", type=int, default=None)
    rd.add_argument("--pose", default=None, help="'tx ty tz qx qy qz qw' (camera-to-world)")
    rd.add_argument("--threads", type=int, default=1)
    rd.add_argument("--out", required=True)
    rd.set_defaults(fn=cmd_render)

    st = sub.add_parser("selftest", help="run built-in oracle/property checks")
    st.set_defaults(fn=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, SceneSpecError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ProviderError, CheckpointFormatError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (InvalidParameterError, DegenerateTemporalExtentError, TrackingDegenerateError,
            np.linalg.LinAlgError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
