"""Training loops, inference and ghost removal."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..core import FwlFrame, LabelVolume, PeakClass, PeakTable, PointCloud, SensorConfig, peaks_to_points
from ..signal import PreprocessSpec, detect_frame_peaks, merge_and_upsample, preprocess, tile, to_original_bins
from . import autograd as ag
from .autograd import Tensor
from .losses import focal_loss, mae_loss, peak_targets
from .model import (MaeConfig, TrainConfig, classify_head, encode_full, init_head, is_encoder_param,
                    mae_forward)
from .optim import AdamW

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class LossTrace:
    rows: list = field(default_factory=list)   # (epoch, step, loss)

    def add(self, epoch, step, loss):
        self.rows.append((int(epoch), int(step), float(loss)))

    def epoch_means(self) -> list:
        out: dict = {}
        for e, _, l in self.rows:
            out.setdefault(e, []).append(l)
        return [float(np.mean(out[e])) for e in sorted(out)]

    def to_csv(self) -> str:
        lines = ["epoch,step,loss"] + [f"{e},{s},{l:.17g}" for e, s, l in self.rows]
        return "\n".join(lines) + "\n"


def _volume(x) -> np.ndarray:
    return np.asarray(x.values if isinstance(x, FwlFrame) else x, dtype=np.float64)


def _crop(rng, shape, hw):
    H, W = shape[:2]
    h, w = hw
    if H < h or W < w:
        raise ValueError(f"frame {H}x{W} is smaller than the model input {h}x{w}")
    r0 = int(rng.integers(0, H - h + 1)) if H > h else 0
    c0 = int(rng.integers(0, W - w + 1)) if W > w else 0
    return slice(r0, r0 + h), slice(c0, c0 + w)


def _check_T(vol, cfg):
    if vol.shape[2] != cfg.input_T:
        raise ValueError(f"frame has {vol.shape[2]} bins, model expects {cfg.input_T}")


def _zero_grads(params, names):
    for k in names:
        params[k].grad = None


def _guard(loss: Tensor, stage, epoch, step, last):
    v = float(loss.data)
    if not np.isfinite(v):
        raise TrainingDiverged(f"{stage} diverged at epoch {epoch} step {step}: loss={v}, "
                               f"last finite loss={last}")
    return v


def pretrain(frames, cfg: MaeConfig, tcfg: TrainConfig, params: dict | None = None):
    """Masked-autoencoder pretraining.  Returns ``(params, LossTrace)``."""
    from .model import init_params

    vols = [_volume(f) for f in frames]
    if not vols:
        raise ValueError("pretraining needs at least one frame")
    for v in vols:
        _check_T(v, cfg)
    params = params if params is not None else init_params(cfg, tcfg.seed)
    names = list(params)
    for k in names:
        params[k].requires_grad = True
    opt = AdamW(params, tcfg, names)
    rng = np.random.default_rng([int(tcfg.seed), 3])
    exact = all(v.shape[:2] == cfg.input_hw for v in vols)
    targets = [peak_targets(v, cfg) for v in vols] if exact else None
    trace = LossTrace()
    step, last = 0, None
    for epoch in range(tcfg.epochs):
        order = rng.permutation(len(vols))
        for s in range(0, len(order), tcfg.batch):
            idx = order[s:s + tcfg.batch]
            if exact:
                batch = np.stack([vols[i] for i in idx])
                tg = [targets[i] for i in idx]
            else:
                crops = [vols[i][_crop(rng, vols[i].shape, cfg.input_hw)] for i in idx]
                batch = np.stack(crops)
                tg = [peak_targets(c, cfg) for c in crops]
            pos_t, amp_t, wid_t = (np.stack([t[j] for t in tg]) for j in range(3))
            _zero_grads(params, names)
            out = mae_forward(params, batch, cfg, rng)
            loss = mae_loss(out.recon, out.target, out.pos, out.amp, out.wid, pos_t, amp_t, wid_t, cfg)
            last = _guard(loss, "pretrain", epoch, step, last)
            loss.backward()
            opt.step(params)
            trace.add(epoch, step, last)
            step += 1
        log.info("pretrain epoch %d loss %.6g", epoch, trace.epoch_means()[-1])
    return params, trace


def _frozen(params: dict) -> dict:
    return {k: Tensor(v.data) for k, v in params.items() if is_encoder_param(k)}


def encoder_features(params: dict, volumes, cfg: MaeConfig, batch: int = 8) -> np.ndarray:
    """Unmasked encoder features ``(n, N, d_enc)``, no graph retained."""
    enc = _frozen(params)
    vols = np.asarray(volumes, dtype=np.float64)
    out = [encode_full(enc, vols[i:i + batch], cfg).data for i in range(0, len(vols), batch)]
    return np.concatenate(out) if out else np.zeros((0, cfg.n_patch, cfg.d_enc))


def finetune(labeled, params: dict, cfg: MaeConfig, tcfg: TrainConfig, head: dict | None = None):
    """Train the classification head on frozen encoder features.

    ``labeled`` holds ``(volume, labels)`` pairs on the model grid.  Returns
    ``(params, LossTrace)`` where ``params`` shares the (untouched) encoder
    tensors with the input and adds the trained head.
    """
    labeled = list(labeled)
    if not labeled:
        raise ValueError("fine-tuning needs at least one labeled frame")
    vols = [_volume(v) for v, _ in labeled]
    labs = [np.asarray(l.labels if isinstance(l, LabelVolume) else l) for _, l in labeled]
    for v, l in zip(vols, labs):
        _check_T(v, cfg)
        if v.shape != l.shape:
            raise ValueError(f"labels {l.shape} do not match volume {v.shape}")
    head = head if head is not None else init_head(cfg, tcfg.seed)
    names = list(head)
    for k in names:
        head[k].requires_grad = True
    opt = AdamW(head, tcfg, names)
    rng = np.random.default_rng([int(tcfg.seed), 4])
    exact = all(v.shape[:2] == cfg.input_hw for v in vols)
    feats = encoder_features(params, vols, cfg) if exact else None
    enc = None if exact else _frozen(params)
    trace = LossTrace()
    step, last = 0, None
    for epoch in range(tcfg.epochs):
        order = rng.permutation(len(vols))
        for s in range(0, len(order), tcfg.batch):
            idx = order[s:s + tcfg.batch]
            if exact:
                f = Tensor(feats[idx])
                y = np.stack([labs[i] for i in idx])
            else:
                cuts = [_crop(rng, vols[i].shape, cfg.input_hw) for i in idx]
                f = Tensor(encode_full(enc, np.stack([vols[i][c] for i, c in zip(idx, cuts)]), cfg).data)
                y = np.stack([labs[i][c] for i, c in zip(idx, cuts)])
            _zero_grads(head, names)
            probs = classify_head(head, f, cfg, rng, training=True)
            loss = focal_loss(probs, y, tcfg.focal_alpha, tcfg.focal_gamma)
            last = _guard(loss, "finetune", epoch, step, last)
            loss.backward()
            opt.step(head)
            trace.add(epoch, step, last)
            step += 1
        log.info("finetune epoch %d loss %.6g", epoch, trace.epoch_means()[-1])
    merged = {k: v for k, v in params.items() if is_encoder_param(k)}
    merged.update(head)
    return merged, trace


def labels_from_probs(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Argmax class where its probability exceeds ``threshold``, else Undefined."""
    probs = np.asarray(probs)
    best = probs.argmax(-1)
    return np.where(probs.max(-1) > threshold, best, int(PeakClass.UNDEFINED)).astype(np.uint8)


def predict_probs(params: dict, volumes, cfg: MaeConfig, batch: int = 8) -> np.ndarray:
    """Class probabilities ``(n, H, W, T, C)`` for model-grid volumes (eval mode)."""
    vols = np.asarray(volumes, dtype=np.float64)
    feats = encoder_features(params, vols, cfg, batch)
    head = {k: Tensor(v.data) for k, v in params.items() if k.startswith("head.")}
    if not head:
        raise ValueError("parameters carry no classification head")
    return np.concatenate([classify_head(head, Tensor(feats[i:i + batch]), cfg).data
                           for i in range(0, len(feats), batch)])


def infer(frame: FwlFrame, params: dict, spec: PreprocessSpec, cfg: MaeConfig,
          threshold: float = 0.5) -> LabelVolume:
    """Labels for a raw frame at its original resolution."""
    if spec.tile_hw != cfg.input_hw[0] or spec.tile_hw != cfg.input_hw[1]:
        raise ValueError(f"tile size {spec.tile_hw} does not match model input {cfg.input_hw}")
    if spec.target_T != cfg.input_T:
        raise ValueError(f"target_T={spec.target_T} does not match model input_T={cfg.input_T}")
    H, W, T = frame.dims
    pre = preprocess(frame, spec)
    tiles, layout = tile(pre, spec.tile_hw)
    probs = predict_probs(params, np.stack([t.values for t in tiles]), cfg)
    labels = [LabelVolume(labels_from_probs(p, threshold)) for p in probs]
    return merge_and_upsample(labels, layout, pre.t_index_map, T, spec.row_crop, H)


def peak_label_lookup(peaks_orig_pos, rows, cols, labels: LabelVolume) -> np.ndarray:
    """Label at each peak's voxel; on sparse grids the nearest retained bin is used."""
    Tl = labels.dims[2]
    tmap = labels.t_index_map
    if tmap is None:
        grid_pos = np.arange(Tl, dtype=np.float64)
        grid_idx = np.arange(Tl)
    else:
        grid_pos = np.asarray(tmap, dtype=np.float64)
        grid_idx = np.arange(Tl) if tmap.size == Tl else np.asarray(tmap)
    p = np.asarray(peaks_orig_pos, dtype=np.float64)
    j = np.clip(np.searchsorted(grid_pos, p), 1, max(len(grid_pos) - 1, 1))
    if len(grid_pos) == 1:
        near = np.zeros(p.size, dtype=np.int64)
    else:
        near = np.where(np.abs(p - grid_pos[j - 1]) <= np.abs(grid_pos[j] - p), j - 1, j)
    return labels.labels[rows, cols, grid_idx[near]]


def remove_ghosts(frame: FwlFrame, labels: LabelVolume, threshold: float, cfg: SensorConfig,
                  pose=None) -> PointCloud:
    """Point cloud of the frame's peaks, minus those labeled Ghost (Undefined is kept)."""
    if labels.dims[:2] != frame.dims[:2]:
        raise ValueError(f"label grid {labels.dims[:2]} does not match frame {frame.dims[:2]}")
    peaks = detect_frame_peaks(frame, threshold)
    pos = to_original_bins(peaks.position, frame.t_index_map)
    lab = peak_label_lookup(pos, peaks.rows, peaks.cols, labels) if len(peaks) else np.zeros(0, np.uint8)
    keep = lab != PeakClass.GHOST
    table = PeakTable(peaks.rows[keep], peaks.cols[keep], pos[keep], peaks.amplitude[keep],
                      peaks.width[keep], lab[keep])
    return peaks_to_points(table, pose or frame.pose, cfg)
