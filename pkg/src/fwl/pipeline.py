"""Staged, content-addressed pipeline: synth -> labels -> preprocess -> pretrain ->
finetune -> infer -> eval.

Every stage output lives in ``<cache>/<stage>-<key>/`` where ``key`` hashes the
stage's parameters together with the output hashes of the stages it reads, so
changing any upstream byte changes every downstream key.  A finished stage
directory is reused as is.  The report holds only content-derived values;
wall-clock runtimes go to a separate file.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import shutil
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .annotate import annotate_frame, gt_map_from_scene
from .baselines import heuristic_waveform_classifier, return_mode_points
from .config import PipelineConfig
from .core import FwlFrame, LabelVolume, PeakClass, PeakTable, PointCloud, Pose, peaks_to_points
from .io import (frame_from_bytes, frame_to_bytes, labels_from_bytes, labels_to_bytes, read_peaks_csv,
                 read_scene, write_peaks_csv)
from .metrics import ghost_recall_counts, ghost_removal_rate
from .nn.checkpoint import checkpoint_from_bytes, checkpoint_to_bytes
from .nn.model import init_head
from .nn.train import finetune, infer, peak_label_lookup, pretrain, remove_ghosts
from .signal import accumulate, detect_frame_peaks, downsample_labels, preprocess, to_original_bins
from .synth import random_glass_scene, synth_frame

DONE = "DONE"


class StageError(RuntimeError):
    def __init__(self, stage: str, inputs: dict, cause: BaseException):
        self.stage, self.inputs = stage, dict(inputs)
        shown = ", ".join(f"{k}={v[:12]}" for k, v in sorted(inputs.items())) or "none"
        super().__init__(f"stage {stage!r} failed (inputs: {shown}): {type(cause).__name__}: {cause}")


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _canon(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def dir_hash(path: Path) -> str:
    """Hash of every file name and byte under ``path`` (the DONE marker excluded)."""
    h = hashlib.sha256()
    for f in sorted(p for p in path.rglob("*") if p.is_file() and p.name != DONE):
        h.update(str(f.relative_to(path)).encode() + b"\0")
        h.update(_sha(f.read_bytes()).encode())
    return h.hexdigest()


def code_fingerprint() -> str:
    """Hash of the package sources, so editing any stage's code re-keys the cache."""
    h = hashlib.sha256()
    root = Path(__file__).resolve().parent
    for f in sorted(p for p in root.rglob("*") if p.suffix in (".py", ".pyx")):
        h.update(f.relative_to(root).as_posix().encode() + b"\0" + f.read_bytes())
    return h.hexdigest()


class StageCache:
    """Single-writer store of finished stage outputs keyed by content."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.code = code_fingerprint()

    def key(self, stage: str, params: dict, inputs: dict) -> str:
        return _sha(_canon({"stage": stage, "params": params, "inputs": inputs, "code": self.code}))

    def run(self, stage: str, params: dict, inputs: dict, fn):
        """Returns ``(out_dir, output_hash, cached)``."""
        key = self.key(stage, params, inputs)
        out = self.root / f"{stage}-{key[:24]}"
        marker = out / DONE
        if marker.exists():
            return out, marker.read_text().strip(), True
        tmp = self.root / f".tmp-{stage}-{key[:24]}"
        if tmp.exists():
            shutil.rmtree(tmp)
        tmp.mkdir(parents=True)
        try:
            fn(tmp)
        except Exception as e:
            shutil.rmtree(tmp, ignore_errors=True)
            raise StageError(stage, inputs, e) from e
        digest = dir_hash(tmp)
        (tmp / DONE).write_text(digest + "\n")
        if out.exists():
            shutil.rmtree(out)
        os.replace(tmp, out)
        return out, digest, False


# -- stage data helpers ---------------------------------------------------------

def _pose_dict(p: Pose) -> dict:
    return {"rotation": list(p.rotation), "translation": list(p.translation), "timestamp": p.timestamp}


def _pose(d: dict) -> Pose:
    return Pose(tuple(d["rotation"]), tuple(d["translation"]), d["timestamp"])


def load_scene(cfg: PipelineConfig, scene_id: int):
    sc = cfg.scenes
    if sc.generator == "paths":
        return read_scene(Path(cfg.base_dir) / sc.paths[scene_id])
    rng = np.random.default_rng([cfg.seed, 7, scene_id])
    return random_glass_scene(rng, sc.ambient_rate_per_bin, sc.amplitude_scale,
                              rng_seed=cfg.seed * 100_003 + scene_id, back_wall=sc.back_wall)


def view_poses(cfg: PipelineConfig, scene_id: int) -> list:
    sc = cfg.scenes
    rng = np.random.default_rng([cfg.seed, 11, scene_id])
    out = []
    for v in range(sc.views_per_scene):
        yaw = rng.uniform(-sc.yaw_jitter_rad, sc.yaw_jitter_rad) if sc.yaw_jitter_rad else 0.0
        dx, dy = (rng.uniform(-sc.offset_jitter_m, sc.offset_jitter_m, 2) if sc.offset_jitter_m else (0.0, 0.0))
        out.append(Pose.from_yaw(float(yaw), (float(dx), float(dy), 0.0), timestamp=float(v)))
    return out


class FrameSet:
    """Frames of one stage directory, described by ``index.json``."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.index = json.loads((self.root / "index.json").read_text())

    def items(self, split: str | None = None):
        return [e for e in self.index["frames"] if split is None or e["split"] == split]

    def frame(self, e) -> FwlFrame:
        return frame_from_bytes((self.root / f"{e['id']}.fwl1").read_bytes(), _pose(e["pose"]), e["id"])

    def labels(self, e) -> LabelVolume:
        return labels_from_bytes((self.root / f"{e['id']}.fwll").read_bytes())

    def peaks(self, e) -> PeakTable:
        return read_peaks_csv(self.root / f"{e['id']}.csv")


def _split_of(cfg: PipelineConfig) -> dict:
    return {i: name for name in ("train", "val", "test") for i in cfg.split.get(name, ())}


# -- stages -------------------------------------------------------------------------

def stage_synth(cfg: PipelineConfig, out: Path):
    split = _split_of(cfg)
    frames = []
    for sid in cfg.scene_ids():
        scene = load_scene(cfg, sid)
        for v, pose in enumerate(view_poses(cfg, sid)):
            fid = f"s{sid:05d}_v{v:02d}"
            r = synth_frame(scene, pose, cfg.sensor, frame_index=v * 1000, frame_id=fid)
            (out / f"{fid}.fwl1").write_bytes(frame_to_bytes(r.frame))
            (out / f"{fid}.fwll").write_bytes(labels_to_bytes(r.labels))
            write_peaks_csv(out / f"{fid}.csv", r.peaks)
            frames.append({"id": fid, "scene": sid, "view": v, "split": split[sid], "pose": _pose_dict(pose),
                           "dropped_returns": r.dropped})
    (out / "index.json").write_text(json.dumps({"frames": frames}, sort_keys=True, indent=1))


def stage_labels(cfg: PipelineConfig, synth: FrameSet, out: Path):
    """Training labels: the planted GT or the annotation pipeline on accumulated repeats."""
    an = cfg.annotate
    entries = [e for e in synth.items() if e["split"] in ("train", "val")]
    stats = {"frames": len(entries), "source": an.labels}
    if an.labels == "annotate":
        agree = total = 0
        for e in entries:
            scene = load_scene(cfg, e["scene"])
            pose = _pose(e["pose"])
            reps = [synth.frame(e)] + [synth_frame(scene, pose, cfg.sensor, e["view"] * 1000 + k).frame
                                       for k in range(1, an.accumulate_frames)]
            acc = accumulate(reps)
            gm = gt_map_from_scene(scene, pose.translation, an.map_spacing_m, an.tau_m)
            peaks, lv = annotate_frame(acc, an.peak_threshold, gm, cfg.sensor)
            (out / f"{e['id']}.fwll").write_bytes(labels_to_bytes(lv))
            g = synth.labels(e).labels
            hit = g[peaks.rows, peaks.cols, np.rint(peaks.position).astype(int)]
            agree += int(np.count_nonzero(hit == peaks.label))
            total += len(peaks)
        stats["peak_agreement_with_gt"] = agree / total if total else None
    else:
        for e in entries:
            shutil.copyfile(synth.root / f"{e['id']}.fwll", out / f"{e['id']}.fwll")
    (out / "stats.json").write_text(json.dumps(stats, sort_keys=True))


def stage_preprocess(cfg: PipelineConfig, synth: FrameSet, labels_dir: Path, out: Path):
    frames = []
    for e in synth.items():
        f = preprocess(synth.frame(e), cfg.preprocess)
        (out / f"{e['id']}.fwl1").write_bytes(frame_to_bytes(f))
        lab_path = labels_dir / f"{e['id']}.fwll" if labels_dir is not None else None
        if lab_path is not None and lab_path.exists():
            lv = downsample_labels(labels_from_bytes(lab_path.read_bytes()), cfg.preprocess)
            (out / f"{e['id']}.fwll").write_bytes(labels_to_bytes(lv))
        frames.append(e)
    (out / "index.json").write_text(json.dumps({"frames": frames}, sort_keys=True, indent=1))


def _train_volumes(pre: FrameSet, cfg: PipelineConfig, with_labels: bool):
    vols, labs = [], []
    for e in pre.items("train"):
        vols.append(np.asarray(pre.frame(e).values))
        if with_labels:
            labs.append(np.asarray(pre.labels(e).labels))
    return vols, labs


def stage_pretrain(cfg: PipelineConfig, pre: FrameSet, out: Path):
    vols, _ = _train_volumes(pre, cfg, False)
    params, trace = pretrain(vols, cfg.model, cfg.train)
    (out / "model.fwlm").write_bytes(checkpoint_to_bytes(params, cfg.model, {"stage": "pretrain"}))
    (out / "loss.csv").write_text(trace.to_csv())


def stage_finetune(cfg: PipelineConfig, pre: FrameSet, pre_dir: Path, out: Path):
    params, mcfg, _ = checkpoint_from_bytes((pre_dir / "model.fwlm").read_bytes())
    vols, labs = _train_volumes(pre, cfg, True)
    tcfg = replace(cfg.train, epochs=cfg.finetune_epochs)
    merged, trace = finetune(list(zip(vols, labs)), params, mcfg, tcfg)
    extra = {"stage": "finetune", "preprocess": asdict(cfg.preprocess)}
    (out / "model.fwlm").write_bytes(checkpoint_to_bytes(merged, mcfg, extra))
    (out / "loss.csv").write_text(trace.to_csv())


def _untrained(params: dict, cfg) -> dict:
    p = {k: v for k, v in params.items() if not k.startswith("head.")}
    p.update(init_head(cfg, 10_007))
    return p


def stage_infer(cfg: PipelineConfig, synth: FrameSet, ft_dir: Path, out: Path):
    params, mcfg, _ = checkpoint_from_bytes((ft_dir / "model.fwlm").read_bytes())
    base = _untrained(params, mcfg)
    th = cfg.eval.label_threshold
    for e in synth.items("test"):
        f = synth.frame(e)
        (out / f"{e['id']}.fwll").write_bytes(labels_to_bytes(infer(f, params, cfg.preprocess, mcfg, th)))
        (out / f"{e['id']}.untrained.fwll").write_bytes(labels_to_bytes(infer(f, base, cfg.preprocess, mcfg, th)))


def _num(x):
    """JSON-safe metric value: NaN becomes the string ``NA``."""
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "NA"
    return float(x)


def _ghost_points(frame: FwlFrame, gt: LabelVolume, peak_threshold: float, cfg):
    """Detected peaks whose GT voxel is Ghost, as world points."""
    peaks = detect_frame_peaks(frame, peak_threshold)
    if len(peaks) == 0:
        return PointCloud(np.zeros((0, 3)))
    pos = to_original_bins(peaks.position, frame.t_index_map)
    lab = peak_label_lookup(pos, peaks.rows, peaks.cols, gt)
    sel = lab == PeakClass.GHOST
    t = PeakTable(peaks.rows[sel], peaks.cols[sel], pos[sel], peaks.amplitude[sel], peaks.width[sel], lab[sel])
    return peaks_to_points(t, frame.pose, cfg)


def _removal(frame, gt, pred, ev, cfg):
    """Removed GT ghost points, GT ghost count, removed GT Object points and GT Object count for one frame."""
    ghosts = _ghost_points(frame, gt, ev.peak_threshold, cfg)
    kept = remove_ghosts(frame, pred, ev.peak_threshold, cfg)
    everything = remove_ghosts(frame, LabelVolume.filled(frame.dims), ev.peak_threshold, cfg)
    n_ghost = len(ghosts)
    removed = 0 if n_ghost == 0 else round(ghost_removal_rate(ghosts, kept, ev.removal_radius_m) * n_ghost)
    lost_objects = n_objects = 0
    if len(everything):
        gl = peak_label_lookup(everything.source[:, 2], everything.source[:, 0].astype(int),
                               everything.source[:, 1].astype(int), gt)
        objects = everything.select(gl == PeakClass.OBJECT)
        n_objects = len(objects)
        if n_objects:
            lost_objects = round(ghost_removal_rate(objects, kept, ev.removal_radius_m) * len(objects))
    return removed, n_ghost, lost_objects, n_objects


def stage_eval(cfg: PipelineConfig, synth: FrameSet, infer_dir: Path | None, out: Path):
    ev = cfg.eval
    tests = synth.items("test")
    acc = {k: [0, 0] for k in ("model", "untrained_head", "heuristic")}
    rem = {"model": [0, 0, 0], "dual_peak": [0, 0, 0], "multi_peak": [0, 0, 0]}
    n_objects = 0
    rows = ["frame,method,ghosts_detected,ghosts_total"]
    for e in tests:
        f, gt, peaks = synth.frame(e), synth.labels(e), synth.peaks(e)
        if ev.oracle:
            preds = {"model": gt}
        else:
            preds = {"model": labels_from_bytes((infer_dir / f"{e['id']}.fwll").read_bytes()),
                     "untrained_head": labels_from_bytes((infer_dir / f"{e['id']}.untrained.fwll").read_bytes())}
        preds["heuristic"] = heuristic_waveform_classifier(f, ev.heuristic_glass_amp_ratio, ev.peak_threshold)
        for name, lv in preds.items():
            h, n = ghost_recall_counts(lv, peaks)
            acc[name][0] += h
            acc[name][1] += n
            rows.append(f"{e['id']},{name},{h},{n}")
        r, n, lost, objs = _removal(f, gt, preds["model"], ev, cfg.sensor)
        n_objects += objs
        rem["model"] = [rem["model"][0] + r, rem["model"][1] + n, rem["model"][2] + lost]
        ghosts = _ghost_points(f, gt, ev.peak_threshold, cfg.sensor)
        for name, k in (("dual_peak", 2), ("multi_peak", 3)):
            pts = return_mode_points(f, k, cfg.sensor, ev.peak_threshold)
            rr = ghost_removal_rate(ghosts, pts, ev.removal_radius_m) if len(ghosts) else 0.0
            rem[name][0] += round(rr * len(ghosts))
            rem[name][1] += len(ghosts)
    metrics = {f"ghost_recall_{k}": _num(h / n if n else None) for k, (h, n) in acc.items() if n or k == "model"}
    metrics["gt_ghost_peaks"] = acc["model"][1]
    for k, (r, n, lost) in rem.items():
        metrics[f"ghost_removal_rate_{k}"] = _num(r / n if n else None)
    metrics["gt_ghost_points"] = rem["model"][1]
    metrics["object_points_removed_model"] = rem["model"][2]
    metrics["gt_object_points"] = n_objects
    (out / "metrics.json").write_text(json.dumps(metrics, sort_keys=True, indent=1))
    (out / "per_frame.csv").write_text("\n".join(rows) + "\n")


# -- driver -------------------------------------------------------------------------

def run_pipeline(cfg: PipelineConfig, workdir, threads: int | None = 1) -> dict:
    """Run the configured stages; writes ``report.json`` and ``runtimes.json`` into ``workdir``.

    ``threads`` caps BLAS threads (``1`` gives bit-reproducible reports);
    ``None`` leaves the thread pools alone.
    """
    from threadpoolctl import threadpool_limits

    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    cache = StageCache(workdir / "cache")
    limiter = threadpool_limits(threads) if threads else None
    try:
        return _run(cfg, workdir, cache)
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


def _run(cfg: PipelineConfig, workdir: Path, cache: StageCache) -> dict:
    stages = set(cfg.stages)
    hashes, dirs, runtimes = {}, {}, {}
    base = {"sensor": asdict(cfg.sensor), "seed": cfg.seed}

    def go(name, params, inputs, fn):
        t0 = time.perf_counter()
        d, h, cached = cache.run(name, params, {k: hashes[k] for k in inputs}, fn)
        runtimes[name] = {"seconds": round(time.perf_counter() - t0, 3), "cached": cached}
        dirs[name], hashes[name] = d, h

    scene_files = {}
    if cfg.scenes.generator == "paths":
        for p in cfg.scenes.paths:
            scene_files[p] = _sha((Path(cfg.base_dir) / p).read_bytes())
    go("synth", {**base, "scenes": asdict(cfg.scenes), "scene_files": scene_files,
                 "split": {k: list(v) for k, v in sorted(cfg.split.items())}}, [],
       lambda out: stage_synth(cfg, out))
    synth = FrameSet(dirs["synth"])
    if "labels" in stages:
        go("labels", {**base, "annotate": asdict(cfg.annotate)}, ["synth"],
           lambda out: stage_labels(cfg, synth, out))
    if "preprocess" in stages:
        go("preprocess", {"preprocess": asdict(cfg.preprocess)}, [k for k in ("synth", "labels") if k in hashes],
           lambda out: stage_preprocess(cfg, synth, dirs.get("labels"), out))
    train_params = {"model": cfg.model.to_dict(), "train": cfg.train.to_dict()}
    if "pretrain" in stages:
        go("pretrain", train_params, ["preprocess"],
           lambda out: stage_pretrain(cfg, FrameSet(dirs["preprocess"]), out))
    if "finetune" in stages:
        go("finetune", {**train_params, "finetune_epochs": cfg.finetune_epochs}, ["preprocess", "pretrain"],
           lambda out: stage_finetune(cfg, FrameSet(dirs["preprocess"]), dirs["pretrain"], out))
    if "infer" in stages:
        go("infer", {"preprocess": asdict(cfg.preprocess), "threshold": cfg.eval.label_threshold},
           ["synth", "finetune"], lambda out: stage_infer(cfg, synth, dirs["finetune"], out))
    if "eval" in stages:
        inputs = ["synth"] + ([] if cfg.eval.oracle else ["infer"])
        go("eval", {"eval": asdict(cfg.eval)}, inputs,
           lambda out: stage_eval(cfg, synth, dirs.get("infer"), out))

    counts = {s: len(synth.items(s)) for s in ("train", "val", "test")}
    report = {
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "stages": {k: {"output_sha256": hashes[k], "dir": dirs[k].name} for k in hashes},
        "frames": counts,
        "scenes": {s: len(cfg.split.get(s, ())) for s in ("train", "val", "test")},
    }
    if "labels" in hashes:
        report["labels"] = json.loads((dirs["labels"] / "stats.json").read_text())
    for k in ("pretrain", "finetune"):
        if k in dirs:
            report[f"{k}_final_loss"] = _final_loss(dirs[k] / "loss.csv")
    if "eval" in dirs:
        report["metrics"] = json.loads((dirs["eval"] / "metrics.json").read_text())
    (workdir / "report.json").write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")
    (workdir / "runtimes.json").write_text(json.dumps(runtimes, sort_keys=True, indent=1) + "\n")
    return report


def _final_loss(path: Path):
    lines = path.read_text().strip().splitlines()[1:]
    if not lines:
        return "NA"
    last_epoch = lines[-1].split(",")[0]
    vals = [float(ln.split(",")[2]) for ln in lines if ln.split(",")[0] == last_epoch]
    return sum(vals) / len(vals)
