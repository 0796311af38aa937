"""Evaluation: peak-level ghost recall, point-level ghost removal rate, detector
ghost false-positive rate and trajectory errors.

Ratios with an empty denominator are returned as ``NA`` (``float('nan')``),
never as 1 or 0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import LabelVolume, OrientedBox, PeakClass, PeakTable, PointCloud, Trajectory

NA = float("nan")


@dataclass(frozen=True)
class DetectionBox:
    center: tuple
    half_extents: tuple
    yaw: float
    label: str
    score: float = 1.0

    def __post_init__(self):
        if len(self.half_extents) != 3 or min(self.half_extents) <= 0:
            raise ValueError("detection extents must be positive")

    def as_box(self) -> OrientedBox:
        return OrientedBox.axis_aligned(self.center, self.half_extents, kind="D", yaw=self.yaw)


def support_voxels(position: float, width: float, t_index_map=None, T: int | None = None):
    """Bins of a label grid covering ``[p - w/2, p + w/2]`` (``p``, ``w`` in original bins)."""
    lo, hi = position - width / 2.0, position + width / 2.0
    if t_index_map is None:
        a, b = max(math.ceil(lo), 0), math.floor(hi)
        if T is not None:
            b = min(b, T - 1)
        return np.arange(a, b + 1)
    tmap = np.asarray(t_index_map)
    return np.flatnonzero((tmap >= lo) & (tmap <= hi))


def ghost_recall(pred: LabelVolume, gt_peaks: PeakTable, downsampled: bool = False) -> float:
    """Share of GT Ghost peaks with at least one predicted Ghost voxel in their FWHM support.

    GT positions/widths are in original bins.  With ``downsampled=True`` the
    prediction grid is the downsampled one and ``pred.t_index_map`` maps its
    bins to original bins.  Undefined predictions count as misses.
    """
    hit, total = ghost_recall_counts(pred, gt_peaks, downsampled)
    return hit / total if total else NA


def ghost_recall_counts(pred: LabelVolume, gt_peaks: PeakTable, downsampled: bool = False) -> tuple:
    """``(detected, total)`` GT Ghost peaks, for pooling recall over many frames."""
    ghosts = gt_peaks.select(gt_peaks.label == PeakClass.GHOST)
    if len(ghosts) == 0:
        return 0, 0
    H, W, T = pred.dims
    if np.any(ghosts.rows >= H) or np.any(ghosts.cols >= W):
        raise ValueError("GT peaks fall outside the prediction grid")
    tmap = pred.t_index_map if downsampled else None
    if downsampled and tmap is None:
        raise ValueError("downsampled prediction needs a t_index_map")
    own = pred.t_index_map
    if not downsampled and own is not None and own.size == T and not np.array_equal(own, np.arange(T)):
        raise ValueError("prediction is on a downsampled grid; pass downsampled=True")
    hit = 0
    for r, c, p, w in zip(ghosts.rows, ghosts.cols, ghosts.position, ghosts.width):
        ks = support_voxels(p, w, tmap, T)
        if ks.size and np.any(pred.labels[r, c, ks] == PeakClass.GHOST):
            hit += 1
    return hit, len(ghosts)


def ghost_removal_rate(gt_ghost_points: PointCloud, denoised: PointCloud, r: float = 0.001) -> float:
    """Share of GT ghost points with no denoised point within ``r`` meters."""
    n = len(gt_ghost_points)
    if n == 0:
        return NA
    if len(denoised) == 0:
        return 1.0
    d, _ = cKDTree(denoised.xyz).query(gt_ghost_points.xyz, k=1)
    return float(np.count_nonzero(d > r)) / n


def _sat_overlap(a: OrientedBox, b: OrientedBox) -> bool:
    """Separating-axis test for two oriented boxes."""
    A, B = np.asarray(a.axes), np.asarray(b.axes)
    ea, eb = np.asarray(a.half_extents), np.asarray(b.half_extents)
    t = np.asarray(b.center) - np.asarray(a.center)
    axes = list(A) + list(B)
    for i in range(3):
        for j in range(3):
            c = np.cross(A[i], B[j])
            if np.linalg.norm(c) > 1e-12:
                axes.append(c / np.linalg.norm(c))
    for L in axes:
        ra = np.sum(ea * np.abs(A @ L))
        rb = np.sum(eb * np.abs(B @ L))
        if abs(np.dot(t, L)) > ra + rb:
            return False
    return True


def ghost_fp_rate(detections, ghost_regions, target_class: str = "pedestrian") -> float:
    """Percentage of ``target_class`` detections that intersect a ghost region."""
    targets = [d for d in detections if d.label == target_class]
    if not targets:
        return NA
    fp = sum(any(_sat_overlap(d.as_box(), g) for g in ghost_regions) for d in targets)
    return 100.0 * fp / len(targets)


def align_rigid(src: np.ndarray, dst: np.ndarray):
    """Least-squares rotation/translation taking ``src`` onto ``dst`` (no scale)."""
    mu_s, mu_d = src.mean(0), dst.mean(0)
    C = (dst - mu_d).T @ (src - mu_s)
    U, _, Vt = np.linalg.svd(C)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1
    R = U @ S @ Vt
    return R, mu_d - R @ mu_s


def _associate(est: Trajectory, gt: Trajectory) -> np.ndarray:
    """Index of the nearest-in-time GT pose for each estimated pose."""
    tg = gt.timestamps
    te = est.timestamps
    j = np.clip(np.searchsorted(tg, te), 1, len(tg) - 1)
    left = np.abs(te - tg[j - 1]) <= np.abs(tg[j] - te)
    return np.where(left, j - 1, j)


def _check_nondegenerate(P: np.ndarray, name: str):
    if len(P) < 3:
        raise ValueError(f"{name} needs at least 3 poses")
    s = np.linalg.svd(P - P.mean(0), compute_uv=False)
    if s[1] <= 1e-9 * max(s[0], 1.0):
        raise ValueError(f"{name} positions are collinear; rigid alignment is undetermined")


def ate(est: Trajectory, gt: Trajectory):
    """Absolute trajectory error (mean, std) in meters after rigid alignment.

    Poses are associated by nearest timestamp for the alignment; each aligned
    estimated position is then scored against its nearest GT position.
    """
    P_est, P_gt = est.positions, gt.positions
    _check_nondegenerate(P_est, "estimated trajectory")
    _check_nondegenerate(P_gt, "ground-truth trajectory")
    assoc = _associate(est, gt)
    R, t = align_rigid(P_est, P_gt[assoc])
    aligned = P_est @ R.T + t
    d, _ = cKDTree(P_gt).query(aligned, k=1)
    return float(d.mean()), float(d.std())


def rte(est: Trajectory, gt: Trajectory, window: int = 10):
    """Relative translation error over ``window``-frame segments (mean, std), in meters.

    The segment motion is expressed in the frame of the segment's first pose,
    so a global rigid transform of either trajectory cancels.
    """
    if len(est) != len(gt):
        raise ValueError("rte needs trajectories with matched timestamps")
    if not np.allclose(est.timestamps, gt.timestamps, atol=1e-9, rtol=0):
        raise ValueError("rte needs matched timestamps")
    if len(est) <= window:
        raise ValueError(f"trajectory of {len(est)} poses is shorter than window {window}")
    errs = []
    for i in range(len(est) - window):
        de = _rel_translation(est[i], est[i + window])
        dg = _rel_translation(gt[i], gt[i + window])
        errs.append(np.linalg.norm(de - dg))
    errs = np.asarray(errs)
    return float(errs.mean()), float(errs.std())


def _rel_translation(a, b) -> np.ndarray:
    return a.matrix().T @ (np.asarray(b.translation) - np.asarray(a.translation))
