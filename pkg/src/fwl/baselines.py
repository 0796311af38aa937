"""Classical comparison methods: return-mode peak selection, point-cloud outlier
filters, voxel downsampling, mirror-consistency ghost detection and a
rule-based waveform classifier."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import FwlFrame, LabelVolume, PeakClass, PeakTable, PointCloud, Pose, SensorConfig, peaks_to_points
from .signal import detect_frame_peaks, select_strongest_table, to_original_bins


SOF_SLACK = 1e-12


@dataclass(frozen=True)
class FilterSpec:
    neighbors: int = 20
    std_ratio: float = 2.0
    min_points: int = 50
    radius: float = 0.5
    voxel_size: float = 1.0

    def __post_init__(self):
        if min(self.neighbors, self.std_ratio, self.min_points, self.radius, self.voxel_size) <= 0:
            raise ValueError("filter parameters must be positive")


def statistical_outlier_filter(cloud: PointCloud, spec: FilterSpec = FilterSpec()) -> PointCloud:
    """Drop points whose mean k-NN distance exceeds mean + std_ratio * std of that statistic."""
    n, k = len(cloud), spec.neighbors
    if n <= k:
        raise ValueError(f"statistical filter needs more than {k} points, got {n}")
    d, _ = cKDTree(cloud.xyz).query(cloud.xyz, k=k + 1)
    stat = d[:, 1:].mean(axis=1)  # column 0 is the point itself
    mu, sd = stat.mean(), stat.std()
    limit = mu + spec.std_ratio * sd
    # a few ulps of slack so a statistic that is constant up to rounding keeps every point
    return cloud.select(stat <= limit + SOF_SLACK * abs(limit))


def radius_outlier_filter(cloud: PointCloud, spec: FilterSpec = FilterSpec()) -> PointCloud:
    """Keep points with at least ``min_points`` other points within ``radius``."""
    if len(cloud) == 0:
        return cloud
    counts = cKDTree(cloud.xyz).query_ball_point(cloud.xyz, r=spec.radius, return_length=True) - 1
    return cloud.select(counts >= spec.min_points)


def voxel_downsample(cloud: PointCloud, size: float = 1.0) -> PointCloud:
    """One centroid per occupied voxel; label by majority, ties become Undefined.

    Output is ordered by voxel index.
    """
    if size <= 0:
        raise ValueError("voxel size must be positive")
    if len(cloud) == 0:
        return cloud
    keys = np.floor(cloud.xyz / size).astype(np.int64)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    m = len(uniq)
    counts = np.bincount(inv, minlength=m).astype(np.float64)
    cent = np.stack([np.bincount(inv, weights=cloud.xyz[:, j], minlength=m) for j in range(3)], 1)
    cent /= counts[:, None]
    codes = np.unique(cloud.labels)
    votes = np.stack([np.bincount(inv, weights=(cloud.labels == c).astype(float), minlength=m)
                      for c in codes], axis=1)
    best = votes.max(axis=1)
    winners = (votes == best[:, None]).sum(axis=1)
    labels = np.where(winners == 1, codes[np.argmax(votes, axis=1)], int(PeakClass.UNDEFINED))
    return PointCloud(cent, labels=labels.astype(np.uint8))


def mirror_symmetry_ghost_detect(cloud: PointCloud, glass_planes, eps: float = 0.1,
                                 sensor_origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Geometric-consistency ghost test of prior point-cloud methods.

    ``glass_planes`` holds ``(point, normal)`` pairs (any object with
    ``point``/``normal`` attributes also works).  A point on the far side of a
    plane, as seen from ``sensor_origin``, is flagged when its mirror image has
    a cloud neighbor within ``eps``.
    """
    flags = np.zeros(len(cloud), dtype=bool)
    if len(cloud) == 0 or not glass_planes:
        return flags
    tree = cKDTree(cloud.xyz)
    origin = np.asarray(sensor_origin, dtype=np.float64)
    for plane in glass_planes:
        p0, n = (plane.point, plane.normal) if hasattr(plane, "normal") else plane
        p0 = np.asarray(p0, dtype=np.float64)
        n = np.asarray(n, dtype=np.float64)
        n = n / np.linalg.norm(n)
        side0 = np.dot(origin - p0, n)
        sd = (cloud.xyz - p0) @ n
        beyond = np.sign(sd) == -np.sign(side0)
        if not np.any(beyond):
            continue
        img = cloud.xyz[beyond] - 2.0 * sd[beyond, None] * n
        d, _ = tree.query(img, k=1)
        flags[np.flatnonzero(beyond)[d <= eps]] = True
    return flags


def heuristic_waveform_classifier(frame: FwlFrame, glass_amp_ratio: float = 1.0,
                                  threshold: float = 0.5) -> LabelVolume:
    """Rule-based labels: a dominant early echo is Glass and everything after it Ghost.

    Per pixel, the first peak whose amplitude exceeds ``glass_amp_ratio`` times
    the largest later peak is Glass, and all later peaks are Ghost; if no peak
    qualifies every peak is Object.  Each peak labels its FWHM support.
    """
    from .annotate import expand_labels_fwhm

    peaks = detect_frame_peaks(frame, threshold)
    labels = heuristic_peak_labels(peaks, glass_amp_ratio)
    lv = expand_labels_fwhm(peaks.with_labels(labels), frame.dims)
    return LabelVolume(lv.labels, frame.t_index_map)


def heuristic_peak_labels(peaks: PeakTable, glass_amp_ratio: float) -> np.ndarray:
    out = np.full(len(peaks), int(PeakClass.OBJECT), dtype=np.uint8)
    if len(peaks) == 0:
        return out
    t = peaks.sorted()
    order = np.lexsort((peaks.position, peaks.cols, peaks.rows))
    pix = t.rows * (int(t.cols.max()) + 1) + t.cols
    starts = np.r_[0, np.flatnonzero(np.diff(pix)) + 1]
    ends = np.r_[starts[1:], len(t)]
    lab_sorted = np.full(len(t), int(PeakClass.OBJECT), dtype=np.uint8)
    for s, e in zip(starts, ends):
        amp = t.amplitude[s:e]
        for i in range(e - s - 1):
            if amp[i] > glass_amp_ratio * amp[i + 1:].max():
                lab_sorted[s + i] = PeakClass.GLASS
                lab_sorted[s + i + 1:e] = PeakClass.GHOST
                break
    out[order] = lab_sorted
    return out


def return_mode_points(frame: FwlFrame, k: int, cfg: SensorConfig, threshold: float = 0.5,
                       pose: Pose | None = None) -> PointCloud:
    """Dual-Peak (k=2) / Multi-Peak (k=3) point cloud of a frame."""
    peaks = select_strongest_table(detect_frame_peaks(frame, threshold), k)
    orig = PeakTable(peaks.rows, peaks.cols, to_original_bins(peaks.position, frame.t_index_map),
                     peaks.amplitude, peaks.width, peaks.label)
    return peaks_to_points(orig, pose or frame.pose, cfg)
