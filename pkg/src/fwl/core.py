"""Sensor model, frame/peak/point containers and geometry shared by every module.

Frames are stored row-major as ``(H, W, T)`` float64 arrays.  Containers are
frozen dataclasses whose arrays are flagged read-only after construction.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

SPEED_OF_LIGHT = 2.998e8  # m/s


class PeakClass(enum.IntEnum):
    """Per-peak / per-voxel class.  Values are the on-disk u8 codes."""

    OBJECT = 0
    GLASS = 1
    GHOST = 2
    NOISE = 3
    UNDEFINED = 255

    @classmethod
    def parse(cls, name: str) -> "PeakClass":
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown class name {name!r}") from None


# Order of the model's class axis.  Identical to the u8 codes 0..3.
TRAIN_CLASSES = (PeakClass.OBJECT, PeakClass.GLASS, PeakClass.GHOST, PeakClass.NOISE)


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SensorConfig:
    rows: int = 512
    cols: int = 400
    bins: int = 700
    bin_duration: float = 1e-9
    max_range: float = 105.0
    v_fov: float = 70.0
    h_fov: float = 120.0
    pulse_sigma: float = 2.0

    def __post_init__(self):
        if min(self.rows, self.cols, self.bins) < 1:
            raise ValueError("rows, cols and bins must be >= 1")
        if not (0.0 < self.v_fov < 180.0 and 0.0 < self.h_fov < 180.0):
            raise ValueError("fields of view must lie in (0, 180) degrees")
        if self.bin_duration <= 0 or self.pulse_sigma <= 0:
            raise ValueError("bin_duration and pulse_sigma must be positive")
        implied = self.bins * self.bin_duration * SPEED_OF_LIGHT / 2.0
        if abs(implied - self.max_range) > 0.01 * self.max_range:
            raise ValueError(
                f"max_range {self.max_range} m inconsistent with bins*bin_duration "
                f"({implied:.3f} m)"
            )

    @classmethod
    def toy(cls) -> "SensorConfig":
        """Desk-scale sensor used by the synthetic learning experiments."""
        return cls(rows=32, cols=32, bins=128, bin_duration=1e-9,
                   max_range=128 * 1e-9 * SPEED_OF_LIGHT / 2, v_fov=60.0, h_fov=60.0)

    @property
    def range_per_bin(self) -> float:
        return SPEED_OF_LIGHT * self.bin_duration / 2.0


@dataclass(frozen=True)
class Pose:
    """Rigid transform sensor->world.  Quaternion stored as (qx, qy, qz, qw)."""

    rotation: tuple = (0.0, 0.0, 0.0, 1.0)
    translation: tuple = (0.0, 0.0, 0.0)
    timestamp: float = 0.0

    def __post_init__(self):
        q = tuple(float(v) for v in self.rotation)
        t = tuple(float(v) for v in self.translation)
        if len(q) != 4 or len(t) != 3:
            raise ValueError("rotation needs 4 components, translation 3")
        n = math.sqrt(sum(v * v for v in q))
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"quaternion norm {n} is not 1")
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "timestamp", float(self.timestamp))

    @classmethod
    def from_yaw(cls, yaw_rad: float, translation=(0.0, 0.0, 0.0), timestamp=0.0) -> "Pose":
        h = 0.5 * yaw_rad
        return cls((0.0, 0.0, math.sin(h), math.cos(h)), translation, timestamp)

    @classmethod
    def from_matrix(cls, R: np.ndarray, t, timestamp=0.0) -> "Pose":
        return cls(tuple(matrix_to_quat(R)), tuple(np.asarray(t, float)), timestamp)

    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.matrix().T + np.asarray(self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        R = self.matrix() @ other.matrix()
        t = self.matrix() @ np.asarray(other.translation) + np.asarray(self.translation)
        return Pose.from_matrix(R, t, other.timestamp)

    def inverse(self) -> "Pose":
        Rt = self.matrix().T
        return Pose.from_matrix(Rt, -Rt @ np.asarray(self.translation), self.timestamp)


def quat_to_matrix(q) -> np.ndarray:
    x, y, z, w = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, 0.25 * s]
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * math.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
        q = [0.0, 0.0, 0.0, (R[k, j] - R[j, k]) / s]
        q[i] = 0.25 * s
        q[j] = (R[j, i] + R[i, j]) / s
        q[k] = (R[k, i] + R[i, k]) / s
    q = np.asarray(q)
    q /= np.linalg.norm(q)
    if q[3] < 0:
        q = -q
    return q


@dataclass(frozen=True)
class Trajectory:
    poses: tuple

    def __post_init__(self):
        poses = tuple(self.poses)
        ts = [p.timestamp for p in poses]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("trajectory timestamps must be strictly increasing")
        object.__setattr__(self, "poses", poses)

    def __len__(self):
        return len(self.poses)

    def __iter__(self):
        return iter(self.poses)

    def __getitem__(self, i):
        return self.poses[i]

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses], dtype=np.float64).reshape(-1, 3)

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([p.timestamp for p in self.poses], dtype=np.float64)

    def transformed(self, T: Pose) -> "Trajectory":
        return Trajectory(tuple(T.compose(p) for p in self.poses))


@dataclass(frozen=True)
class FwlFrame:
    values: np.ndarray
    pose: Pose = field(default_factory=Pose)
    frame_id: str = "0"
    t_index_map: np.ndarray | None = None

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise ValueError(f"frame values must be (H, W, T), got shape {v.shape}")
        if v.size and not np.all(v >= 0):
            raise ValueError("frame intensities must be non-negative")
        object.__setattr__(self, "values", _readonly(v))
        object.__setattr__(self, "t_index_map", _check_index_map(self.t_index_map, v.shape[2]))

    @property
    def dims(self) -> tuple:
        return self.values.shape

    def original_bins(self) -> np.ndarray:
        if self.t_index_map is None:
            return np.arange(self.dims[2])
        return self.t_index_map


def _check_index_map(tmap, T):
    if tmap is None:
        return None
    m = np.array(tmap, dtype=np.int64).reshape(-1)
    if m.size != T:
        raise ValueError(f"t_index_map has {m.size} entries for T={T}")
    if m.size > 1 and not np.all(np.diff(m) > 0):
        raise ValueError("t_index_map must be strictly increasing")
    if m.size and m[0] < 0:
        raise ValueError("t_index_map entries must be non-negative")
    return _readonly(m)


@dataclass(frozen=True)
class LabelVolume:
    """Per-voxel class codes.

    ``t_index_map`` has the same meaning as on :class:`FwlFrame` for
    downsampled volumes.  Volumes produced by upsampling back to the original
    grid keep the map as the list of original bins that carry predictions.
    """

    labels: np.ndarray
    t_index_map: np.ndarray | None = None

    def __post_init__(self):
        lab = np.array(self.labels, dtype=np.uint8)
        if lab.ndim != 3:
            raise ValueError(f"labels must be (H, W, T), got {lab.shape}")
        valid = np.isin(lab, [int(c) for c in PeakClass])
        if not np.all(valid):
            raise ValueError("unknown class code in label volume")
        object.__setattr__(self, "labels", _readonly(lab))
        tmap = self.t_index_map
        if tmap is not None:
            m = np.array(tmap, dtype=np.int64).reshape(-1)
            if m.size > 1 and not np.all(np.diff(m) > 0):
                raise ValueError("t_index_map must be strictly increasing")
            object.__setattr__(self, "t_index_map", _readonly(m))

    @property
    def dims(self) -> tuple:
        return self.labels.shape

    @classmethod
    def filled(cls, dims, cls_code=PeakClass.NOISE, t_index_map=None) -> "LabelVolume":
        return cls(np.full(dims, int(cls_code), dtype=np.uint8), t_index_map)


@dataclass(frozen=True)
class Peak:
    pixel: tuple
    position: float
    amplitude: float
    width: float
    label: PeakClass = PeakClass.NOISE

    def __post_init__(self):
        if self.amplitude <= 0 or self.width <= 0 or self.position < 0:
            raise ValueError(f"invalid peak {self}")


@dataclass
class PeakTable:
    """Struct-of-arrays peak list for whole frames.  Row order is (row, col, position)."""

    rows: np.ndarray
    cols: np.ndarray
    position: np.ndarray
    amplitude: np.ndarray
    width: np.ndarray
    label: np.ndarray

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.int64).reshape(-1)
        self.cols = np.asarray(self.cols, dtype=np.int64).reshape(-1)
        self.position = np.asarray(self.position, dtype=np.float64).reshape(-1)
        self.amplitude = np.asarray(self.amplitude, dtype=np.float64).reshape(-1)
        self.width = np.asarray(self.width, dtype=np.float64).reshape(-1)
        lab = self.label
        if lab is None:
            lab = np.full(self.rows.shape, int(PeakClass.NOISE))
        self.label = np.asarray(lab, dtype=np.uint8).reshape(-1)
        n = self.rows.size
        if any(a.size != n for a in (self.cols, self.position, self.amplitude, self.width, self.label)):
            raise ValueError("peak table columns differ in length")

    def __len__(self):
        return int(self.rows.size)

    @classmethod
    def empty(cls) -> "PeakTable":
        z = np.zeros(0)
        return cls(z, z, z, z, z, z)

    @classmethod
    def from_peaks(cls, peaks: Iterable[Peak]) -> "PeakTable":
        peaks = list(peaks)
        if not peaks:
            return cls.empty()
        return cls(
            [p.pixel[0] for p in peaks], [p.pixel[1] for p in peaks],
            [p.position for p in peaks], [p.amplitude for p in peaks],
            [p.width for p in peaks], [int(p.label) for p in peaks],
        )

    def to_peaks(self) -> list[Peak]:
        return [
            Peak((int(r), int(c)), float(p), float(a), float(w), PeakClass(int(lab)))
            for r, c, p, a, w, lab in zip(self.rows, self.cols, self.position,
                                          self.amplitude, self.width, self.label)
        ]

    def select(self, mask) -> "PeakTable":
        return PeakTable(self.rows[mask], self.cols[mask], self.position[mask],
                         self.amplitude[mask], self.width[mask], self.label[mask])

    def with_labels(self, labels) -> "PeakTable":
        return PeakTable(self.rows, self.cols, self.position, self.amplitude, self.width, labels)

    def sorted(self) -> "PeakTable":
        order = np.lexsort((self.position, self.cols, self.rows))
        return self.select(order)

    @staticmethod
    def concat(tables: Sequence["PeakTable"]) -> "PeakTable":
        tables = [t for t in tables if len(t)]
        if not tables:
            return PeakTable.empty()
        return PeakTable(*(np.concatenate([getattr(t, f) for t in tables])
                           for f in ("rows", "cols", "position", "amplitude", "width", "label")))


@dataclass
class PointCloud:
    xyz: np.ndarray
    source: np.ndarray | None = None  # (N, 3): row, col, original fractional bin
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        n = self.xyz.shape[0]
        if not np.all(np.isfinite(self.xyz)):
            raise ValueError("point coordinates must be finite")
        if self.source is None:
            self.source = np.full((n, 3), -1.0)
        self.source = np.asarray(self.source, dtype=np.float64).reshape(-1, 3)
        if self.labels is None:
            self.labels = np.full(n, int(PeakClass.UNDEFINED))
        self.labels = np.asarray(self.labels, dtype=np.uint8).reshape(-1)
        if self.source.shape[0] != n or self.labels.size != n:
            raise ValueError("point cloud columns differ in length")

    def __len__(self):
        return int(self.xyz.shape[0])

    def select(self, mask) -> "PointCloud":
        return PointCloud(self.xyz[mask], self.source[mask], self.labels[mask])

    @staticmethod
    def concat(clouds: Sequence["PointCloud"]) -> "PointCloud":
        clouds = list(clouds)
        if not clouds:
            return PointCloud(np.zeros((0, 3)))
        return PointCloud(np.concatenate([c.xyz for c in clouds]),
                          np.concatenate([c.source for c in clouds]),
                          np.concatenate([c.labels for c in clouds]))


# -- geometry ---------------------------------------------------------------

def bin_to_range(t, cfg: SensorConfig):
    """Fractional bin -> one-way range in meters."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(t_arr > cfg.bins):
        raise ValueError(f"bin {t} outside [0, {cfg.bins}]")
    r = t_arr * SPEED_OF_LIGHT * cfg.bin_duration / 2.0
    return float(r) if r.ndim == 0 else r


def range_to_bin(r, cfg: SensorConfig):
    t = np.asarray(r, dtype=np.float64) * 2.0 / (SPEED_OF_LIGHT * cfg.bin_duration)
    return float(t) if t.ndim == 0 else t


def pixel_angles(rows, cols, cfg: SensorConfig):
    """Azimuth/elevation in radians on the equiangular grid; row 0 is the top, col 0 the left."""
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    hf, vf = math.radians(cfg.h_fov), math.radians(cfg.v_fov)
    az = hf / 2 - cols * hf / (cfg.cols - 1) if cfg.cols > 1 else np.zeros_like(cols)
    el = vf / 2 - rows * vf / (cfg.rows - 1) if cfg.rows > 1 else np.zeros_like(rows)
    return az, el


def pixel_to_direction(pixel, cfg: SensorConfig) -> np.ndarray:
    r, c = pixel
    if not (0 <= r < cfg.rows and 0 <= c < cfg.cols):
        raise ValueError(f"pixel {pixel} outside {cfg.rows}x{cfg.cols} grid")
    return pixel_directions(np.array([r]), np.array([c]), cfg)[0]


def pixel_directions(rows, cols, cfg: SensorConfig) -> np.ndarray:
    """Vectorized :func:`pixel_to_direction`; returns (N, 3) unit vectors in the sensor frame."""
    az, el = pixel_angles(rows, cols, cfg)
    ce = np.cos(el)
    return np.stack([ce * np.cos(az), ce * np.sin(az), np.sin(el)], axis=-1)


def direction_grid(cfg: SensorConfig) -> np.ndarray:
    rr, cc = np.meshgrid(np.arange(cfg.rows), np.arange(cfg.cols), indexing="ij")
    return pixel_directions(rr.ravel(), cc.ravel(), cfg).reshape(cfg.rows, cfg.cols, 3)


def peak_to_point(peak: Peak, pose: Pose, cfg: SensorConfig) -> PointCloud:
    """Single peak -> world point.  ``peak.position`` must be in original bins."""
    table = PeakTable.from_peaks([peak])
    return peaks_to_points(table, pose, cfg)


def peaks_to_points(peaks: PeakTable, pose: Pose, cfg: SensorConfig) -> PointCloud:
    if len(peaks) == 0:
        return PointCloud(np.zeros((0, 3)))
    rng = bin_to_range(peaks.position, cfg)
    dirs = pixel_directions(peaks.rows, peaks.cols, cfg)
    local = dirs * np.asarray(rng).reshape(-1, 1)
    src = np.stack([peaks.rows, peaks.cols, peaks.position], axis=1).astype(np.float64)
    return PointCloud(pose.apply(local), src, peaks.label.copy())


@dataclass(frozen=True)
class OrientedBox:
    """Box with rows of ``axes`` as its local x/y/z directions."""

    center: tuple
    axes: tuple
    half_extents: tuple
    kind: str = "G"
    pair_id: int = 0

    def __post_init__(self):
        A = np.asarray(self.axes, dtype=np.float64).reshape(3, 3)
        if not np.allclose(A @ A.T, np.eye(3), atol=1e-9):
            raise ValueError("box axes must be orthonormal")
        if len(self.half_extents) != 3 or min(self.half_extents) <= 0:
            raise ValueError("box half-extents must be three positive lengths")
        object.__setattr__(self, "center", tuple(float(x) for x in self.center))
        object.__setattr__(self, "axes", tuple(tuple(float(x) for x in row) for row in A))
        object.__setattr__(self, "half_extents", tuple(float(x) for x in self.half_extents))

    @classmethod
    def axis_aligned(cls, center, half_extents, kind="G", pair_id=0, yaw: float = 0.0):
        c, s = math.cos(yaw), math.sin(yaw)
        return cls(center, ((c, s, 0.0), (-s, c, 0.0), (0.0, 0.0, 1.0)), half_extents, kind, pair_id)

    def contains(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        local = (pts - np.asarray(self.center)) @ np.asarray(self.axes).T
        return np.all(np.abs(local) <= np.asarray(self.half_extents), axis=1)

    def corners(self) -> np.ndarray:
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], float)
        return np.asarray(self.center) + (signs * np.asarray(self.half_extents)) @ np.asarray(self.axes)
