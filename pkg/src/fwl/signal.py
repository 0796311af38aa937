"""Waveform processing: peak detection, accumulation, crop/downsample, tiling and upsampling."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .core import FwlFrame, LabelVolume, Peak, PeakClass, PeakTable, Pose


@dataclass(frozen=True)
class PreprocessSpec:
    row_crop: int = 90
    front_bin_crop: int = 25
    target_T: int = 256
    tile_hw: int = 128

    def __post_init__(self):
        if self.row_crop < 0 or self.front_bin_crop < 0:
            raise ValueError("crops must be non-negative")
        if self.target_T < 1 or self.tile_hw < 1:
            raise ValueError("target_T and tile_hw must be >= 1")

    def check(self, H: int, T: int) -> None:
        if 2 * self.row_crop >= H:
            raise ValueError(f"row_crop={self.row_crop} leaves no rows of H={H}")
        if self.target_T > T - self.front_bin_crop:
            raise ValueError(
                f"target_T={self.target_T} exceeds {T - self.front_bin_crop} bins left after front crop"
            )


@dataclass(frozen=True)
class TileLayout:
    origins: tuple          # (h0, w0) per tile, row-major
    padded: tuple           # (Hp, Wp)
    original: tuple         # (H, W)
    tile_hw: int


# -- peaks ------------------------------------------------------------------

def detect_peaks(waveform, threshold: float, pixel=(0, 0)) -> list[Peak]:
    """Peaks of one waveform, ascending in position."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    w = np.ascontiguousarray(np.asarray(waveform, dtype=np.float64).reshape(1, -1))
    _, pos, amp, wid = kernels.detect_peaks_batch(w, float(threshold))
    return [Peak(tuple(pixel), float(p), float(a), float(wd)) for p, a, wd in zip(pos, amp, wid)]


def detect_frame_peaks(frame: FwlFrame | np.ndarray, threshold: float) -> PeakTable:
    """Peaks of every pixel.  Positions are in the frame's own bin units."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    values = frame.values if isinstance(frame, FwlFrame) else np.asarray(frame, dtype=np.float64)
    H, W, T = values.shape
    flat = np.ascontiguousarray(values.reshape(H * W, T))
    idx, pos, amp, wid = kernels.detect_peaks_batch(flat, float(threshold))
    return PeakTable(idx // W, idx % W, pos, amp, wid, None)


def to_original_bins(position, t_index_map) -> np.ndarray:
    """Fractional downsampled bin -> fractional original bin (piecewise linear)."""
    position = np.asarray(position, dtype=np.float64)
    if t_index_map is None:
        return position
    tmap = np.asarray(t_index_map, dtype=np.float64)
    return np.interp(position, np.arange(tmap.size), tmap)


def select_strongest(waveform, k: int, threshold: float = 1e-9) -> list[Peak]:
    """Dual-Peak (k=2) / Multi-Peak (k=3) return modes: the k largest-amplitude peaks."""
    if k < 1:
        raise ValueError("k must be >= 1")
    peaks = detect_peaks(waveform, threshold)
    keep = sorted(peaks, key=lambda p: (-p.amplitude, p.position))[:k]
    return sorted(keep, key=lambda p: p.position)


def select_strongest_table(peaks: PeakTable, k: int) -> PeakTable:
    """Per-pixel top-k by amplitude over a whole-frame peak table."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(peaks) == 0:
        return peaks
    order = np.lexsort((peaks.position, -peaks.amplitude, peaks.cols, peaks.rows))
    t = peaks.select(order)
    pix = t.rows * (t.cols.max() + 1) + t.cols
    starts = np.r_[0, np.flatnonzero(np.diff(pix)) + 1]
    rank = np.arange(len(t)) - np.repeat(starts, np.diff(np.r_[starts, len(t)]))
    return t.select(rank < k).sorted()


# -- accumulation -----------------------------------------------------------

def _same_pose(a: Pose, b: Pose, tol=1e-9) -> bool:
    return (np.allclose(a.rotation, b.rotation, atol=tol, rtol=0)
            and np.allclose(a.translation, b.translation, atol=tol, rtol=0))


def accumulate(frames) -> FwlFrame:
    """Element-wise mean of repeated frames from one viewpoint."""
    frames = list(frames)
    if not frames:
        raise ValueError("need at least one frame")
    ref = frames[0]
    for f in frames[1:]:
        if f.dims != ref.dims:
            raise ValueError(f"frame dims differ: {f.dims} vs {ref.dims}")
        if not _same_pose(f.pose, ref.pose):
            raise ValueError(f"frame {f.frame_id} was captured from a different viewpoint")
    # sorted summation order keeps the result independent of list order
    stack = np.sort(np.stack([f.values for f in frames]), axis=0)
    return FwlFrame(stack.mean(axis=0), ref.pose, ref.frame_id, ref.t_index_map)


# -- preprocessing ------------------------------------------------------------

def downsample_index_map(bins: int, front_bin_crop: int, target_T: int) -> np.ndarray:
    """Original bin kept at each downsampled index (uniform index selection)."""
    t_eff = bins - front_bin_crop
    if target_T < 1 or target_T > t_eff:
        raise ValueError(f"cannot select {target_T} of {t_eff} bins")
    if target_T == 1:
        return np.array([front_bin_crop], dtype=np.int64)
    k = np.arange(target_T, dtype=np.float64)
    return front_bin_crop + np.floor(k * (t_eff - 1) / (target_T - 1) + 0.5).astype(np.int64)


def preprocess(frame: FwlFrame, spec: PreprocessSpec) -> FwlFrame:
    H, W, T = frame.dims
    spec.check(H, T)
    sel = downsample_index_map(T, spec.front_bin_crop, spec.target_T)
    vals = frame.values[spec.row_crop:H - spec.row_crop][:, :, sel]
    tmap = frame.original_bins()[sel]
    return FwlFrame(vals, frame.pose, frame.frame_id, tmap)


# -- tiling -----------------------------------------------------------------

def tile(frame: FwlFrame, tile_hw: int):
    if tile_hw < 1:
        raise ValueError("tile_hw must be >= 1")
    H, W, T = frame.dims
    Hp, Wp = tile_hw * math.ceil(H / tile_hw), tile_hw * math.ceil(W / tile_hw)
    padded = np.zeros((Hp, Wp, T))
    padded[:H, :W] = frame.values
    origins = tuple((h0, w0) for h0 in range(0, Hp, tile_hw) for w0 in range(0, Wp, tile_hw))
    tiles = [FwlFrame(padded[h0:h0 + tile_hw, w0:w0 + tile_hw], frame.pose,
                      f"{frame.frame_id}:{h0}:{w0}", frame.t_index_map)
             for h0, w0 in origins]
    return tiles, TileLayout(origins, (Hp, Wp), (H, W), tile_hw)


def _reassemble(blocks, layout: TileLayout, dtype):
    if len(blocks) != len(layout.origins):
        raise ValueError(f"expected {len(layout.origins)} tiles, got {len(blocks)}")
    T = blocks[0].shape[2]
    out = np.zeros(layout.padded + (T,), dtype=dtype)
    s = layout.tile_hw
    for b, (h0, w0) in zip(blocks, layout.origins):
        if b.shape[:2] != (s, s) or b.shape[2] != T:
            raise ValueError(f"tile shape {b.shape} does not match layout tile {s}x{s}x{T}")
        out[h0:h0 + s, w0:w0 + s] = b
    H, W = layout.original
    return out[:H, :W]


def untile(tiles, layout: TileLayout) -> FwlFrame:
    vals = _reassemble([t.values for t in tiles], layout, np.float64)
    return FwlFrame(vals, tiles[0].pose, tiles[0].frame_id.split(":")[0], tiles[0].t_index_map)


def merge_and_upsample(tile_labels, layout: TileLayout, t_index_map, original_T: int,
                       row_crop: int = 0, original_H: int | None = None) -> LabelVolume:
    """Reassemble tile predictions and place them back on the original bin grid.

    Bins that were not selected by downsampling, and rows removed by the row
    crop, are filled with Noise.
    """
    merged = _reassemble([np.asarray(t.labels) for t in tile_labels], layout, np.uint8)
    H, W, Td = merged.shape
    tmap = np.arange(Td) if t_index_map is None else np.asarray(t_index_map, dtype=np.int64)
    if tmap.size != Td:
        raise ValueError(f"index map has {tmap.size} entries for {Td} predicted bins")
    if tmap.size and tmap[-1] >= original_T:
        raise ValueError("index map points past the original bin count")
    full_H = H + 2 * row_crop if original_H is None else original_H
    if full_H - 2 * row_crop != H:
        raise ValueError(f"row crop {row_crop} inconsistent with H={H}, original {full_H}")
    out = np.full((full_H, W, original_T), int(PeakClass.NOISE), dtype=np.uint8)
    out[row_crop:row_crop + H][:, :, tmap] = merged
    return LabelVolume(out, tmap)


def downsample_labels(labels: LabelVolume, spec: PreprocessSpec) -> LabelVolume:
    """Apply the preprocess crop/selection to a label volume aligned with a raw frame."""
    H, W, T = labels.dims
    spec.check(H, T)
    sel = downsample_index_map(T, spec.front_bin_crop, spec.target_T)
    return LabelVolume(labels.labels[spec.row_crop:H - spec.row_crop][:, :, sel], sel)
