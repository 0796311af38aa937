"""Semi-automatic peak annotation against a ghost-free reference map.

A peak becomes a 3D point; the point is labeled from its nearest-neighbor
distance to the map and from manually supplied glass (G) and reflection (R)
regions, then the label is written back to the peak and spread over the
peak's FWHM in the waveform grid.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree

from . import kernels
from .core import (FwlFrame, LabelVolume, OrientedBox, Peak, PeakClass, PeakTable, PointCloud, Pose,
                   SensorConfig, peaks_to_points)
from .signal import detect_frame_peaks, to_original_bins


@dataclass
class GtMap:
    points: PointCloud
    glass_regions: list = field(default_factory=list)
    reflection_regions: list = field(default_factory=list)
    tau: float = 0.5
    alignment: Pose = field(default_factory=Pose)

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        by_pair = {b.pair_id: b for b in self.reflection_regions}
        for g in self.glass_regions:
            r = by_pair.get(g.pair_id)
            if r is not None and not np.all(r.contains(g.corners())):
                raise ValueError(f"reflection region {g.pair_id} does not enclose its glass region")

    @cached_property
    def tree(self) -> cKDTree:
        if len(self.points) == 0:
            raise ValueError("GT map has no points")
        return cKDTree(self.points.xyz)


def _in_any(boxes, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    hit = np.zeros(len(pts), dtype=bool)
    for b in boxes:
        hit |= b.contains(pts)
    return hit


def nn_distances(xyz, gt: GtMap) -> np.ndarray:
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    d, _ = gt.tree.query(xyz, k=1)
    return np.asarray(d, dtype=np.float64)


def nn_distance(x, gt: GtMap) -> float:
    return float(nn_distances(x, gt)[0])


def classify_points(xyz, gt: GtMap) -> np.ndarray:
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    out = np.full(len(xyz), int(PeakClass.NOISE), dtype=np.uint8)
    if len(xyz) == 0:
        return out
    d = nn_distances(xyz, gt)
    in_g = _in_any(gt.glass_regions, xyz)
    in_r = _in_any(gt.reflection_regions, xyz)
    out[(d > gt.tau) & in_r] = PeakClass.GHOST
    out[d < gt.tau] = PeakClass.OBJECT
    out[in_g] = PeakClass.GLASS
    return out


def classify_point(x, gt: GtMap) -> PeakClass:
    return PeakClass(int(classify_points(x, gt)[0]))


def expand_labels_fwhm(peaks, dims) -> LabelVolume:
    """Label ``[p - w/2, p + w/2]`` around each peak; nearer peaks win overlaps, the rest is Noise."""
    if not isinstance(peaks, PeakTable):
        peaks = PeakTable.from_peaks(peaks)
    H, W, T = dims
    if len(peaks) and np.any(peaks.width <= 0):
        raise ValueError("peak widths must be positive")
    flat = np.ascontiguousarray(peaks.rows * W + peaks.cols, dtype=np.int64)
    lab = kernels.expand_labels(flat, np.ascontiguousarray(peaks.position),
                                np.ascontiguousarray(peaks.width),
                                np.ascontiguousarray(peaks.label), H * W, T, int(PeakClass.NOISE))
    return LabelVolume(lab.reshape(H, W, T))


def annotate_frame(acc_frame: FwlFrame, threshold: float, gt: GtMap, cfg: SensorConfig):
    """Detect, localize and classify every peak of an accumulated frame.

    Returns the labeled peak table (frame bin units) and its FWHM-expanded
    label volume on the frame's grid.
    """
    peaks = detect_frame_peaks(acc_frame, threshold)
    if len(peaks) == 0:
        return peaks, LabelVolume.filled(acc_frame.dims, t_index_map=acc_frame.t_index_map)
    orig = PeakTable(peaks.rows, peaks.cols, to_original_bins(peaks.position, acc_frame.t_index_map),
                     peaks.amplitude, peaks.width, peaks.label)
    cloud = peaks_to_points(orig, gt.alignment.compose(acc_frame.pose), cfg)
    labeled = peaks.with_labels(classify_points(cloud.xyz, gt))
    lv = expand_labels_fwhm(labeled, acc_frame.dims)
    return labeled, LabelVolume(lv.labels, acc_frame.t_index_map)


def glass_regions_for(surface, sensor_origin, pair_id: int, depth: float = 20.0,
                      margin: float = 0.3, lateral_scale: float = 4.0):
    """G/R boxes around a synthetic glass surface.

    G hugs the pane (``margin`` thick); R starts just in front of the pane
    and extends ``depth`` meters away from the sensor, widened laterally so
    it contains every ghost seen through the pane.
    """
    n = np.asarray(surface.normal)
    away = -n if np.dot(np.asarray(sensor_origin) - np.asarray(surface.point), n) > 0 else n
    u = np.asarray(surface.u_axis)
    v = np.cross(away, u)
    axes = (tuple(u), tuple(v), tuple(away))
    eu, ev = surface.half_extents
    g = OrientedBox(surface.point, axes, (eu + margin, ev + margin, margin), "G", pair_id)
    rc = np.asarray(surface.point) + away * (depth / 2 - margin)
    r = OrientedBox(tuple(rc), axes, (lateral_scale * eu + depth, lateral_scale * ev + depth,
                                      depth / 2 + margin), "R", pair_id)
    return g, r


def gt_map_from_scene(scene, sensor_origin=(0.0, 0.0, 0.0), spacing: float = 0.1, tau: float = 0.5,
                      alignment: Pose | None = None, depth: float = 20.0) -> GtMap:
    """Reference map and regions built from true synthetic geometry."""
    from .synth import map_points

    gs, rs = [], []
    for i, s in enumerate(scene.surfaces):
        if s.is_glass:
            g, r = glass_regions_for(s, sensor_origin, i, depth=depth)
            gs.append(g)
            rs.append(r)
    return GtMap(map_points(scene, spacing), gs, rs, tau, alignment or Pose())
