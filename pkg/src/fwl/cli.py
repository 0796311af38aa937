"""``fwl`` command line.  Exit codes: 0 ok, 2 configuration/usage error, 3 runtime error."""
from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class UsageError(ValueError):
    """Bad arguments or inputs that a user can fix (exit code 2)."""


# -- shared helpers --------------------------------------------------------------------

def _sensor(args):
    from .config import load_config
    from .core import SensorConfig

    if args.config:
        return load_config(args.config).sensor
    return SensorConfig.toy() if args.toy else SensorConfig()


def _pose(args):
    """Pose from ``--poses`` (TUM) and ``--pose-index``; identity otherwise."""
    from .core import Pose
    from .io import read_tum

    if getattr(args, "poses", None):
        traj = read_tum(args.poses)
        if not 0 <= args.pose_index < len(traj):
            raise UsageError(f"pose index {args.pose_index} outside trajectory of {len(traj)} poses")
        return traj[args.pose_index]
    return Pose()


def _read_frame(path, args=None):
    from .io import read_frame

    return read_frame(path, _pose(args) if args is not None else None)


def _emit(pairs: dict, csv_path=None):
    """Machine-readable key=value lines (and optionally one CSV row)."""
    def fmt(v):
        if isinstance(v, float):
            return "NA" if math.isnan(v) else repr(v)
        return str(v)

    for k, v in pairs.items():
        print(f"{k}={fmt(v)}")
    if csv_path:
        Path(csv_path).write_text(",".join(pairs) + "\n" + ",".join(fmt(v) for v in pairs.values()) + "\n")


def _spec(args):
    from .signal import PreprocessSpec

    if args.config:
        from .config import load_config
        return load_config(args.config).preprocess
    return PreprocessSpec(args.row_crop, args.front_crop, args.target_bins, args.tile)


# -- commands --------------------------------------------------------------------------

def cmd_synth(args):
    from .core import Pose, Trajectory
    from .annotate import gt_map_from_scene
    from .io import (frame_to_bytes, labels_to_bytes, read_scene, write_peaks_csv, write_ply, write_regions,
                     write_scene, write_tum)
    from .synth import random_glass_scene, synth_frame

    cfg = _sensor(args)
    if args.scene:
        scene = read_scene(args.scene)
    else:
        scene = random_glass_scene(np.random.default_rng([args.seed, 7, args.scene_id]), args.ambient,
                                   args.amplitude_scale,
                                   rng_seed=args.seed * 100_003 + args.scene_id)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    poses = [Pose.from_yaw(args.yaw_step * i, (args.step_m * i, 0.0, 0.0), timestamp=float(i))
             for i in range(args.frames)]
    total = 0
    for i, pose in enumerate(poses):
        r = synth_frame(scene, pose, cfg, frame_index=i, frame_id=f"frame_{i:04d}")
        (out / f"frame_{i:04d}.fwl1").write_bytes(frame_to_bytes(r.frame))
        (out / f"frame_{i:04d}.fwll").write_bytes(labels_to_bytes(r.labels))
        write_peaks_csv(out / f"frame_{i:04d}.csv", r.peaks)
        total += len(r.peaks)
    write_tum(out / "poses.tum", Trajectory(poses))
    write_scene(out / "scene.toml", scene)
    gm = gt_map_from_scene(scene)
    write_ply(out / "map.ply", gm.points)
    write_regions(out / "regions.toml", gm.glass_regions, gm.reflection_regions, gm.tau)
    _emit({"frames": args.frames, "gt_peaks": total, "out": str(out)})


def cmd_accumulate(args):
    from .io import write_frame
    from .signal import accumulate

    acc = accumulate([_read_frame(p) for p in args.frames])
    write_frame(args.out, acc)
    _emit({"frames": len(args.frames), "out": args.out})


def cmd_annotate(args):
    from .annotate import GtMap
    from .annotate import annotate_frame
    from .io import read_ply, read_regions, write_labels, write_peaks_csv

    cfg = _sensor(args)
    reg = read_regions(args.regions) if args.regions else {"glass": [], "reflection": [], "tau_m": args.tau,
                                                             "alignment": None}
    tau = args.tau if args.tau is not None else reg["tau_m"]
    from .core import Pose
    gm = GtMap(read_ply(args.map), reg["glass"], reg["reflection"], tau, reg["alignment"] or Pose())
    frame = _read_frame(args.frame, args)
    peaks, lv = annotate_frame(frame, args.threshold, gm, cfg)
    write_labels(args.out_labels, lv)
    if args.out_peaks:
        write_peaks_csv(args.out_peaks, peaks)
    counts = {f"n_{c.name.lower()}": int(np.count_nonzero(peaks.label == c)) for c in list(_classes())[:4]}
    _emit({"peaks": len(peaks), **counts})


def _classes():
    from .core import PeakClass
    return PeakClass


def cmd_preprocess(args):
    from .io import read_labels, write_frame, write_labels
    from .signal import downsample_labels, preprocess

    spec = _spec(args)
    f = preprocess(_read_frame(args.frame), spec)
    write_frame(args.out, f)
    if args.labels and args.out_labels:
        write_labels(args.out_labels, downsample_labels(read_labels(args.labels), spec))
    _emit({"dims": "x".join(map(str, f.dims)), "out": args.out})


def cmd_peaks(args):
    from .core import PeakTable
    from .io import write_peaks_csv
    from .signal import detect_frame_peaks, select_strongest_table, to_original_bins

    f = _read_frame(args.frame)
    t = detect_frame_peaks(f, args.threshold)
    if args.strongest:
        t = select_strongest_table(t, args.strongest)
    if args.original_bins:
        t = PeakTable(t.rows, t.cols, to_original_bins(t.position, f.t_index_map), t.amplitude, t.width, t.label)
    write_peaks_csv(args.out, t)
    _emit({"peaks": len(t), "out": args.out})


def cmd_baseline(args):
    from .baselines import (FilterSpec, heuristic_waveform_classifier, mirror_symmetry_ghost_detect,
                            radius_outlier_filter, return_mode_points, statistical_outlier_filter)
    from .core import PointCloud
    from .io import read_ply, read_regions, write_labels, write_ply

    m = args.method
    if m in ("dual", "multi"):
        f = _read_frame(args.input, args)
        cloud = return_mode_points(f, 2 if m == "dual" else 3, _sensor(args), args.threshold)
        write_ply(args.out, cloud)
        _emit({"points": len(cloud)})
    elif m in ("sof", "rof"):
        spec = FilterSpec(neighbors=args.neighbors, std_ratio=args.std_ratio, min_points=args.min_points,
                          radius=args.radius)
        cloud = read_ply(args.input)
        fn = statistical_outlier_filter if m == "sof" else radius_outlier_filter
        kept = fn(cloud, spec)
        write_ply(args.out, kept)
        _emit({"points_in": len(cloud), "points_out": len(kept)})
    elif m == "mirror":
        if not args.regions:
            raise UsageError("--method mirror needs --regions with G boxes (their local z is the pane normal)")
        cloud = read_ply(args.input)
        planes = [(b.center, b.axes[2]) for b in read_regions(args.regions)["glass"]]
        flags = mirror_symmetry_ghost_detect(cloud, planes, args.eps)
        labels = np.where(flags, int(_classes().GHOST), cloud.labels).astype(np.uint8)
        write_ply(args.out, PointCloud(cloud.xyz, cloud.source, labels))
        _emit({"points": len(cloud), "flagged": int(flags.sum())})
    elif m == "heuristic":
        lv = heuristic_waveform_classifier(_read_frame(args.input), args.glass_amp_ratio, args.threshold)
        write_labels(args.out, lv)
        _emit({"ghost_voxels": int(np.count_nonzero(lv.labels == _classes().GHOST))})


def _model_from(args):
    from .config import load_config
    from .nn.model import MaeConfig, TrainConfig

    if args.config:
        pc = load_config(args.config)
        return pc.model, pc.train, pc.finetune_epochs, pc.preprocess
    return MaeConfig(input_scale=0.1), TrainConfig(), None, None


def cmd_pretrain(args):
    from .io import read_frame
    from .nn.checkpoint import save_checkpoint
    from .nn.train import pretrain

    mcfg, tcfg, _, _ = _model_from(args)
    tcfg = replace(tcfg, seed=args.seed, **({"epochs": args.epochs} if args.epochs is not None else {}))
    vols = [read_frame(p).values for p in args.frames]
    params, trace = pretrain(vols, mcfg, tcfg)
    save_checkpoint(args.out, params, mcfg, {"stage": "pretrain"})
    if args.loss_csv:
        Path(args.loss_csv).write_text(trace.to_csv())
    means = trace.epoch_means()
    _emit({"frames": len(vols), "epochs": len(means), "final_loss": means[-1] if means else float("nan")})


def cmd_finetune(args):
    from .io import read_frame, read_labels
    from .nn.checkpoint import load_checkpoint, save_checkpoint
    from .nn.train import finetune

    if len(args.frames) != len(args.labels):
        raise UsageError("--frames and --labels must pair up one to one")
    params, mcfg, extra = load_checkpoint(args.checkpoint)
    _, tcfg, ft_epochs, spec = _model_from(args)
    epochs = args.epochs if args.epochs is not None else (ft_epochs or tcfg.epochs)
    tcfg = replace(tcfg, seed=args.seed, epochs=epochs)
    data = [(read_frame(f).values, read_labels(l).labels) for f, l in zip(args.frames, args.labels)]
    merged, trace = finetune(data, params, mcfg, tcfg)
    extra = dict(extra, stage="finetune")
    if spec is not None:
        extra["preprocess"] = {"row_crop": spec.row_crop, "front_bin_crop": spec.front_bin_crop,
                               "target_T": spec.target_T, "tile_hw": spec.tile_hw}
    save_checkpoint(args.out, merged, mcfg, extra)
    if args.loss_csv:
        Path(args.loss_csv).write_text(trace.to_csv())
    means = trace.epoch_means()
    _emit({"frames": len(data), "epochs": len(means), "final_loss": means[-1] if means else float("nan")})


def cmd_infer(args):
    from .io import write_labels
    from .nn.checkpoint import load_checkpoint
    from .nn.train import infer
    from .signal import PreprocessSpec

    params, mcfg, extra = load_checkpoint(args.checkpoint)
    if args.config:
        spec = _spec(args)
    elif "preprocess" in extra:
        spec = PreprocessSpec(**extra["preprocess"])
    else:
        spec = PreprocessSpec(args.row_crop, args.front_crop, args.target_bins, args.tile)
    lv = infer(_read_frame(args.frame), params, spec, mcfg, args.threshold)
    write_labels(args.out, lv)
    _emit({"ghost_voxels": int(np.count_nonzero(lv.labels == _classes().GHOST)),
           "undefined_voxels": int(np.count_nonzero(lv.labels == _classes().UNDEFINED))})


def cmd_remove_ghosts(args):
    from .io import read_labels, write_ply
    from .nn.train import remove_ghosts

    frame = _read_frame(args.frame, args)
    cloud = remove_ghosts(frame, read_labels(args.labels), args.threshold, _sensor(args))
    write_ply(args.out, cloud)
    _emit({"points": len(cloud)})


def cmd_eval(args):
    from .core import OrientedBox
    from .io import read_labels, read_peaks_csv, read_ply, read_regions, read_tum
    from . import metrics

    t = args.task
    need = {"recall": ("pred", "gt"), "removal": ("gt", "denoised"), "fp": ("detections", "regions"),
            "ate": ("est", "gt"), "rte": ("est", "gt")}[t]
    missing = [f"--{n}" for n in need if not getattr(args, n)]
    if missing:
        raise UsageError(f"--task {t} needs {' '.join(missing)}")
    if t == "recall":
        pred = read_labels(args.pred)
        h, n = metrics.ghost_recall_counts(pred, read_peaks_csv(args.gt), args.downsampled)
        out = {"task": t, "ghosts_detected": h, "ghosts_total": n, "recall": h / n if n else float("nan")}
    elif t == "removal":
        gt, den = read_ply(args.gt), read_ply(args.denoised)
        out = {"task": t, "gt_points": len(gt), "denoised_points": len(den),
               "removal_rate": metrics.ghost_removal_rate(gt, den, args.radius)}
    elif t == "fp":
        dets = _read_detections(args.detections)
        reg = read_regions(args.regions)
        regions = reg["glass"] + reg["reflection"] if args.all_regions else reg["reflection"]
        out = {"task": t, "detections": len(dets), "fp_rate_percent":
               metrics.ghost_fp_rate(dets, regions, args.target_class)}
    else:
        est, gt = read_tum(args.est), read_tum(args.gt)
        mean, std = metrics.ate(est, gt) if t == "ate" else metrics.rte(est, gt, args.window)
        out = {"task": t, "mean_m": mean, "std_m": std}
    _emit(out, args.csv)


def _read_detections(path):
    """CSV with columns cx,cy,cz,hx,hy,hz,yaw,label[,score]."""
    import csv

    from .metrics import DetectionBox

    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append(DetectionBox((float(r["cx"]), float(r["cy"]), float(r["cz"])),
                                (float(r["hx"]), float(r["hy"]), float(r["hz"])), float(r["yaw"]), r["label"],
                                float(r.get("score") or 1.0)))
    return out


def cmd_pipeline(args):
    from .config import load_config
    from .pipeline import run_pipeline

    if not args.config:
        raise UsageError("pipeline needs --config")
    cfg = load_config(args.config)
    if args.seed_given:
        cfg = replace(cfg, seed=args.seed, train=replace(cfg.train, seed=args.seed))
    report = run_pipeline(cfg, args.workdir, threads=args.threads or 1)
    flat = {"report": str(Path(args.workdir) / "report.json")}
    for k, v in sorted(report.get("metrics", {}).items()):
        flat[k] = v
    for k, v in report["frames"].items():
        flat[f"frames_{k}"] = v
    _emit(flat)


def cmd_validate(args):
    from .config import validate_config

    path = args.path or args.config
    if not path:
        raise UsageError("validate needs a config path")
    diags = validate_config(path)
    for d in diags:
        print(d)
    if diags:
        return EXIT_CONFIG
    print("ok")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fwl", description="Full-waveform LiDAR ghost toolkit")
    p.add_argument("--seed", type=int, default=None, help="seed for stochastic stages (default 0)")
    p.add_argument("--threads", type=int, default=None, help="cap on BLAS/OpenMP threads")
    p.add_argument("--config", help="pipeline TOML (sensor, preprocess and model sections are reused)")
    sub = p.add_subparsers(dest="command", required=True)

    def sensor_flags(s):
        s.add_argument("--toy", action="store_true", help="use the 32x32x128 desk-scale sensor")

    def pose_flags(s):
        s.add_argument("--poses", help="TUM trajectory holding the frame pose")
        s.add_argument("--pose-index", type=int, default=0)

    def pre_flags(s):
        s.add_argument("--row-crop", type=int, default=90)
        s.add_argument("--front-crop", type=int, default=25)
        s.add_argument("--target-bins", type=int, default=256)
        s.add_argument("--tile", type=int, default=128)

    s = sub.add_parser("synth", help="render frames, labels and GT peaks from a scene")
    s.add_argument("--scene", help="scene TOML; a procedural glass scene otherwise")
    s.add_argument("--scene-id", type=int, default=0)
    s.add_argument("--frames", type=int, default=1)
    s.add_argument("--step-m", type=float, default=0.0, help="forward motion per frame")
    s.add_argument("--yaw-step", type=float, default=0.0, help="yaw change per frame (rad)")
    s.add_argument("--ambient", type=float, default=0.02, help="ambient counts per bin")
    s.add_argument("--amplitude-scale", type=float, default=3000.0)
    s.add_argument("--out", required=True)
    sensor_flags(s)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("accumulate", help="average frames taken from one pose")
    s.add_argument("--frames", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_accumulate)

    s = sub.add_parser("annotate", help="label peaks against a reference map and regions")
    s.add_argument("--frame", required=True)
    s.add_argument("--map", required=True)
    s.add_argument("--regions")
    s.add_argument("--tau", type=float, default=None, help="distance threshold (m); region file value otherwise")
    s.add_argument("--threshold", type=float, default=0.5, help="peak detection threshold")
    s.add_argument("--out-labels", required=True)
    s.add_argument("--out-peaks")
    sensor_flags(s)
    pose_flags(s)
    s.set_defaults(fn=cmd_annotate)

    s = sub.add_parser("preprocess", help="crop rows/bins and downsample time")
    s.add_argument("--frame", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--labels")
    s.add_argument("--out-labels")
    pre_flags(s)
    s.set_defaults(fn=cmd_preprocess)

    s = sub.add_parser("peaks", help="detect peaks to CSV")
    s.add_argument("--frame", required=True)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--strongest", type=int, default=0, help="keep the k strongest per pixel")
    s.add_argument("--original-bins", action="store_true", help="report positions in original bins")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_peaks)

    s = sub.add_parser("baseline", help="classical comparison methods")
    s.add_argument("--method", required=True, choices=["dual", "multi", "sof", "rof", "mirror", "heuristic"])
    s.add_argument("--input", required=True, help="FWL1 frame (dual/multi/heuristic) or PLY cloud")
    s.add_argument("--out", required=True)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--neighbors", type=int, default=20)
    s.add_argument("--std-ratio", type=float, default=2.0)
    s.add_argument("--min-points", type=int, default=50)
    s.add_argument("--radius", type=float, default=0.5)
    s.add_argument("--regions", help="region file whose G boxes define glass planes (mirror)")
    s.add_argument("--eps", type=float, default=0.1)
    s.add_argument("--glass-amp-ratio", type=float, default=1.0)
    sensor_flags(s)
    pose_flags(s)
    s.set_defaults(fn=cmd_baseline)

    s = sub.add_parser("pretrain", help="masked waveform autoencoder pretraining")
    s.add_argument("--frames", nargs="+", required=True, help="preprocessed FWL1 frames")
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--loss-csv")
    s.set_defaults(fn=cmd_pretrain)

    s = sub.add_parser("finetune", help="train the ghost classifier on a frozen encoder")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--frames", nargs="+", required=True)
    s.add_argument("--labels", nargs="+", required=True)
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--loss-csv")
    s.set_defaults(fn=cmd_finetune)

    s = sub.add_parser("infer", help="label a raw frame with a fine-tuned model")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--frame", required=True)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--out", required=True)
    pre_flags(s)
    s.set_defaults(fn=cmd_infer)

    s = sub.add_parser("remove-ghosts", help="point cloud without Ghost-labeled peaks")
    s.add_argument("--frame", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--out", required=True)
    sensor_flags(s)
    pose_flags(s)
    s.set_defaults(fn=cmd_remove_ghosts)

    s = sub.add_parser("eval", help="metrics as key=value lines")
    s.add_argument("--task", required=True, choices=["recall", "removal", "fp", "ate", "rte"])
    s.add_argument("--pred")
    s.add_argument("--gt")
    s.add_argument("--downsampled", action="store_true")
    s.add_argument("--denoised")
    s.add_argument("--radius", type=float, default=0.001)
    s.add_argument("--detections")
    s.add_argument("--regions")
    s.add_argument("--all-regions", action="store_true", help="count G boxes as ghost regions too")
    s.add_argument("--target-class", default="pedestrian")
    s.add_argument("--est")
    s.add_argument("--window", type=int, default=10)
    s.add_argument("--csv")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("pipeline", help="run the configured stages with caching")
    s.add_argument("--workdir", default="fwl-run")
    s.set_defaults(fn=cmd_pipeline)

    s = sub.add_parser("validate", help="check a config file")
    s.add_argument("path", nargs="?")
    s.set_defaults(fn=cmd_validate)
    return p


def main(argv=None) -> int:
    from .config import ConfigError
    from .io import FormatError
    from .pipeline import StageError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    args.seed_given = args.seed is not None
    if args.seed is None:
        args.seed = 0
    limiter = None
    if args.threads:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(args.threads)
    try:
        rc = args.fn(args)
        return EXIT_OK if rc is None else rc
    except ConfigError as e:
        print(str(e), file=sys.stderr)
        return EXIT_CONFIG
    except (UsageError, FormatError, FileNotFoundError, ValueError) as e:
        # invalid inputs (degenerate trajectories, mismatched shapes, ...) are user-fixable
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001 - report and map to the runtime exit code
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
