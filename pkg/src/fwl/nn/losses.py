"""Pretraining and classification objectives."""
from __future__ import annotations

import numpy as np

from ..signal import detect_frame_peaks
from . import autograd as ag
from .autograd import Tensor
from .model import MaeConfig

PROB_FLOOR = 1e-12


def peak_targets(volume, cfg: MaeConfig):
    """Per-patch peak targets ``(N, K)`` x 3 for one ``(H, W, T)`` model-grid volume.

    Each pixel contributes its ``K`` nearest-range peaks (zero-padded);
    slots are averaged over the patch's pixels.  Values are in model bins and
    in ``input_scale`` amplitude units.
    """
    vol = np.asarray(volume, dtype=np.float64) * cfg.input_scale
    H, W, T = vol.shape
    K = cfg.K
    slots = np.zeros((3, H, W, K))
    if T >= 3:
        pk = detect_frame_peaks(vol, cfg.peak_threshold)
        if len(pk):
            # peaks come out ascending in (pixel, position): rank within pixel
            pix = pk.rows * W + pk.cols
            first = np.r_[0, np.flatnonzero(np.diff(pix)) + 1]
            rank = np.arange(len(pk)) - np.repeat(first, np.diff(np.r_[first, len(pk)]))
            keep = rank < K
            r, c, k = pk.rows[keep], pk.cols[keep], rank[keep]
            slots[0, r, c, k] = pk.position[keep]
            slots[1, r, c, k] = pk.amplitude[keep]
            slots[2, r, c, k] = pk.width[keep]
    ph, pw, _ = cfg.patch
    gh, gw, gt = H // ph, W // pw, T // cfg.patch[2]
    per = slots.reshape(3, gh, ph, gw, pw, K).mean(axis=(2, 4))      # (3, gh, gw, K)
    # tubes repeat along time when the patch does not span all bins
    per = np.repeat(per[:, :, :, None, :], gt, axis=3).reshape(3, gh * gw * gt, K)
    return per[0], per[1], per[2]


def mae_loss(recon, target, pos, amp, wid, pos_t, amp_t, wid_t, cfg: MaeConfig) -> Tensor:
    """MSE over masked-patch voxels plus weighted L1 peak terms (mean over all slots)."""
    d = ag.sub(recon, target)
    mse = ag.mean(ag.mul(d, d))
    l_pos = ag.mean(ag.absolute(ag.sub(pos, pos_t)))
    l_amp = ag.mean(ag.absolute(ag.sub(amp, amp_t)))
    l_wid = ag.mean(ag.absolute(ag.sub(wid, wid_t)))
    return ag.add(ag.add(mse, ag.mul(l_pos, cfg.lambda_p)),
                  ag.add(ag.mul(l_amp, cfg.lambda_a), ag.mul(l_wid, cfg.lambda_w)))


def focal_loss(probs, labels, alpha=(0.05, 0.25, 0.7, 0.0001), gamma: float = 2.0) -> Tensor:
    """Mean over labeled voxels of ``-alpha_c (1 - p_c)^gamma log p_c``.

    ``probs`` has the class axis last; voxels labeled outside ``0..C-1``
    (e.g. Undefined) are ignored.
    """
    probs = probs if isinstance(probs, Tensor) else Tensor(probs)
    labels = np.asarray(labels)
    C = probs.shape[-1]
    if labels.shape != probs.shape[:-1]:
        raise ValueError(f"labels {labels.shape} do not match probabilities {probs.shape[:-1]}")
    s = probs.data.sum(-1)
    if np.any(np.abs(s - 1.0) > 1e-6):
        raise ValueError("class probabilities must sum to 1 per voxel")
    valid = labels < C
    n = int(np.count_nonzero(valid))
    if n == 0:
        return Tensor(0.0)
    lab = np.where(valid, labels, 0).astype(np.int64)[..., None]
    pc = ag.take_along(probs, lab, axis=-1)
    a = np.asarray(alpha, dtype=np.float64)[lab] * valid[..., None]
    logp = ag.log(pc, clamp=PROB_FLOOR)
    if gamma == 0:
        term = logp
    else:
        term = ag.mul(ag.power(ag.sub(1.0, pc), gamma), logp)
    return ag.mul(ag.sum_(ag.mul(term, a)), -1.0 / n)
