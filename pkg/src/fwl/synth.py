"""Synthetic labeled FWL frames from planar scenes with glass multi-path ghosts.

Ray model (per pixel):

* glass panes crossed before the first opaque hit each return a Glass echo
  and are traversed with a two-way transmission loss ``rho_t**2``;
* each crossed pane also spawns one specular bounce; if that leg hits an
  opaque surface the return is a Ghost, placed along the original ray at the
  total one-way path, i.e. at the mirror image of the hit point;
* the first opaque hit is an Object return.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .core import (FwlFrame, LabelVolume, PeakClass, PeakTable, PointCloud, Pose,
                   SensorConfig, Trajectory, direction_grid, range_to_bin)

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))
_EPS = 1e-9


@dataclass(frozen=True)
class Opaque:
    reflectance: float

    def __post_init__(self):
        if not 0.0 < self.reflectance <= 1.0:
            raise ValueError("opaque reflectance must lie in (0, 1]")


@dataclass(frozen=True)
class Glass:
    surface_reflectance: float
    transmittance: float
    surface_echo: float | None = None  # retro echo factor; defaults to 0.1 * surface_reflectance

    def __post_init__(self):
        if not 0.0 <= self.surface_reflectance < 1.0:
            raise ValueError("glass surface_reflectance must lie in [0, 1)")
        if not 0.0 < self.transmittance <= 1.0:
            raise ValueError("glass transmittance must lie in (0, 1]")
        if self.surface_reflectance + self.transmittance > 1.0 + 1e-12:
            raise ValueError("glass reflectance + transmittance exceeds 1")
        if self.surface_echo is None:
            object.__setattr__(self, "surface_echo", 0.1 * self.surface_reflectance)
        if not 0.0 <= self.surface_echo <= 1.0:
            raise ValueError("glass surface_echo must lie in [0, 1]")


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("zero-length vector")
    return v / n


@dataclass(frozen=True)
class Surface:
    """Bounded plane.  ``u_axis`` is projected onto the plane; a default is chosen if omitted."""

    point: tuple
    normal: tuple
    half_extents: tuple
    material: Opaque | Glass
    u_axis: tuple | None = None
    name: str = ""

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError("surface normal must be unit length")
        if len(self.half_extents) != 2 or min(self.half_extents) <= 0:
            raise ValueError("surface half-extents must be two positive lengths")
        if self.u_axis is None:
            helper = np.array([0.0, 0.0, 1.0]) if abs(n[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
            u = np.cross(helper, n)
        else:
            u = np.asarray(self.u_axis, dtype=np.float64)
            u = u - np.dot(u, n) * n
        u = _unit(u)
        object.__setattr__(self, "point", tuple(float(x) for x in self.point))
        object.__setattr__(self, "normal", tuple(float(x) for x in n))
        object.__setattr__(self, "u_axis", tuple(float(x) for x in u))
        object.__setattr__(self, "half_extents", tuple(float(x) for x in self.half_extents))

    @property
    def v_axis(self) -> np.ndarray:
        return np.cross(np.asarray(self.normal), np.asarray(self.u_axis))

    @property
    def is_glass(self) -> bool:
        return isinstance(self.material, Glass)

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Ray parameter of the hit for each ray (inf where missed)."""
        n = np.asarray(self.normal)
        p0 = np.asarray(self.point)
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            s = ((p0 - origins) @ n) / denom
        ok = (np.abs(denom) > 1e-12) & (s > _EPS)
        q = origins + dirs * np.where(ok, s, 0.0)[:, None] - p0
        eu, ev = self.half_extents
        ok &= (np.abs(q @ np.asarray(self.u_axis)) <= eu) & (np.abs(q @ self.v_axis) <= ev)
        return np.where(ok, s, np.inf)

    def mirror(self, pts: np.ndarray) -> np.ndarray:
        n = np.asarray(self.normal)
        d = (np.asarray(pts, dtype=np.float64) - np.asarray(self.point)) @ n
        return pts - 2.0 * d[..., None] * n

    def sample(self, spacing: float) -> np.ndarray:
        eu, ev = self.half_extents
        a = np.linspace(-eu, eu, max(2, int(math.ceil(2 * eu / spacing)) + 1))
        b = np.linspace(-ev, ev, max(2, int(math.ceil(2 * ev / spacing)) + 1))
        A, B = np.meshgrid(a, b, indexing="ij")
        return (np.asarray(self.point) + A.reshape(-1, 1) * np.asarray(self.u_axis)
                + B.reshape(-1, 1) * self.v_axis)


@dataclass(frozen=True)
class Scene:
    surfaces: tuple = ()
    ambient_rate: float = 0.0
    amplitude_scale: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "surfaces", tuple(self.surfaces))
        if self.ambient_rate < 0:
            raise ValueError("ambient_rate must be >= 0")
        if self.amplitude_scale <= 0:
            raise ValueError("amplitude_scale must be > 0")


@dataclass(frozen=True)
class EmissionReturn:
    path_length: float           # apparent one-way range along the emitted ray (m)
    energy_factor: float
    label: PeakClass
    surface_chain: tuple = ()
    hit_point: tuple | None = None  # physical opaque hit for Object/Ghost returns

    def __post_init__(self):
        if self.path_length <= 0 or not 0 < self.energy_factor <= 1:
            raise ValueError(f"invalid return {self}")


@dataclass
class RayReturns:
    """Flat struct-of-arrays output of :func:`trace_rays`."""

    ray: np.ndarray
    path: np.ndarray
    factor: np.ndarray
    label: np.ndarray
    glass_id: np.ndarray      # -1 when no glass generated the return
    surface_id: np.ndarray    # surface hit last
    hit_point: np.ndarray     # (N, 3)


def _nearest(surfaces, origins, dirs, exclude=None):
    n = origins.shape[0]
    best = np.full(n, np.inf)
    idx = np.full(n, -1, dtype=np.int64)
    for i, s in enumerate(surfaces):
        if exclude is not None and i == exclude:
            continue
        t = s.intersect(origins, dirs)
        closer = t < best
        best = np.where(closer, t, best)
        idx = np.where(closer, i, idx)
    return best, idx


def trace_rays(scene: Scene, origins: np.ndarray, dirs: np.ndarray) -> RayReturns:
    """Vectorized two-bounce trace of many rays."""
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), np.shape(dirs)).copy()
    dirs = np.asarray(dirs, dtype=np.float64)
    n_rays = dirs.shape[0]
    surf = scene.surfaces
    out = {k: [] for k in ("ray", "path", "factor", "label", "glass", "sid", "hit")}

    def emit(mask, path, factor, label, glass, sid, hit):
        keep = mask & (factor > 0)
        r = np.flatnonzero(keep)
        out["ray"].append(r)
        out["path"].append(path[keep])
        out["factor"].append(factor[keep])
        out["label"].append(np.full(r.size, int(label), dtype=np.uint8))
        out["glass"].append(np.broadcast_to(glass, (n_rays,))[keep].astype(np.int64))
        out["sid"].append(np.broadcast_to(sid, (n_rays,))[keep].astype(np.int64))
        out["hit"].append(hit[keep])

    s_all = np.stack([s.intersect(origins, dirs) for s in surf], axis=1) if surf else np.zeros((n_rays, 0))
    opaque = np.array([not s.is_glass for s in surf], dtype=bool)
    s_op = np.where(opaque[None, :], s_all, np.inf)
    first_op = np.argmin(s_op, axis=1) if surf else np.zeros(n_rays, dtype=np.int64)
    d_op = s_op[np.arange(n_rays), first_op] if surf else np.full(n_rays, np.inf)

    trans_total = np.ones(n_rays)
    for g, sg in enumerate(surf):
        if not sg.is_glass:
            continue
        mat = sg.material
        d_g = s_all[:, g]
        before = np.isfinite(d_g) & (d_g < d_op)
        # transmission loss of panes crossed before this one
        trans = np.ones(n_rays)
        for h, sh in enumerate(surf):
            if h != g and sh.is_glass:
                trans *= np.where(s_all[:, h] < d_g, sh.material.transmittance ** 2, 1.0)
        hit_g = origins + dirs * np.where(before, d_g, 0.0)[:, None]
        emit(before, d_g, trans * mat.surface_echo, PeakClass.GLASS, g, g, hit_g)
        trans_total *= np.where(before, mat.transmittance ** 2, 1.0)

        nrm = np.asarray(sg.normal)
        rdir = dirs - 2.0 * (dirs @ nrm)[:, None] * nrm
        s2, j = _nearest(surf, hit_g, rdir, exclude=g)
        j_safe = np.where(j >= 0, j, 0)
        ghost = before & np.isfinite(s2) & (j >= 0) & opaque[j_safe]
        refl = np.array([surf[k].material.reflectance if opaque[k] else 0.0 for k in range(len(surf))])
        hit2 = hit_g + rdir * np.where(ghost, s2, 0.0)[:, None]
        emit(ghost, d_g + np.where(ghost, s2, 0.0),
             trans * mat.surface_reflectance * refl[j_safe], PeakClass.GHOST, g, j_safe, hit2)

    hit_o = np.isfinite(d_op)
    refl_o = np.array([s.material.reflectance if not s.is_glass else 0.0 for s in surf]) if surf else np.zeros(1)
    hit_pt = origins + dirs * np.where(hit_o, d_op, 0.0)[:, None]
    emit(hit_o, d_op, trans_total * refl_o[first_op], PeakClass.OBJECT, -1, first_op, hit_pt)

    cat = {k: (np.concatenate(v) if v else np.zeros(0)) for k, v in out.items()}
    order = np.lexsort((cat["path"], cat["ray"]))
    return RayReturns(cat["ray"][order].astype(np.int64), cat["path"][order], cat["factor"][order],
                      cat["label"][order].astype(np.uint8), cat["glass"][order].astype(np.int64),
                      cat["sid"][order].astype(np.int64),
                      cat["hit"][order].reshape(-1, 3) if cat["hit"].size else np.zeros((0, 3)))


def trace_ray(scene: Scene, origin, direction) -> list[EmissionReturn]:
    d = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise ValueError("ray direction must be unit length")
    rr = trace_rays(scene, np.asarray(origin, dtype=np.float64)[None, :], d[None, :])
    res = []
    for i in range(rr.path.size):
        chain = (int(rr.glass_id[i]), int(rr.surface_id[i])) if rr.glass_id[i] >= 0 and \
            rr.label[i] == PeakClass.GHOST else (int(rr.surface_id[i]),)
        res.append(EmissionReturn(float(rr.path[i]), float(rr.factor[i]), PeakClass(int(rr.label[i])),
                                  chain, tuple(rr.hit_point[i])))
    return res


def render_waveform(returns, cfg: SensorConfig, rng: np.random.Generator | None = None,
                    amplitude_scale: float = 1.0, ambient_rate: float = 0.0):
    """Sum of Gaussian pulses plus Poisson ambient counts.

    Returns ``(waveform, n_dropped)``; returns past the last bin are dropped.
    """
    t = np.arange(cfg.bins, dtype=np.float64)
    w = np.zeros(cfg.bins)
    dropped = 0
    s2 = 2.0 * cfg.pulse_sigma ** 2
    for r in returns:
        t0 = range_to_bin(r.path_length, cfg)
        if t0 >= cfg.bins:
            dropped += 1
            continue
        a = amplitude_scale * r.energy_factor / r.path_length ** 2
        w += a * np.exp(-(t - t0) ** 2 / s2)
    if ambient_rate > 0:
        if rng is None:
            raise ValueError("ambient noise requested without an rng")
        w += rng.poisson(ambient_rate, cfg.bins)
    return w, dropped


@dataclass
class SynthResult:
    frame: FwlFrame
    labels: LabelVolume
    peaks: PeakTable        # ground truth, original bins
    returns: RayReturns     # per-return geometry, aligned with ``peaks`` rows
    dropped: int = 0


def pixel_rng(seed: int, frame_index: int, pixel_index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(frame_index), int(pixel_index)])


def synth_frame(scene: Scene, pose: Pose, cfg: SensorConfig, frame_index: int = 0,
                frame_id: str | None = None) -> SynthResult:
    H, W, T = cfg.rows, cfg.cols, cfg.bins
    local = direction_grid(cfg).reshape(-1, 3)
    dirs = local @ pose.matrix().T
    origin = np.asarray(pose.translation)
    rr = trace_rays(scene, origin, dirs)

    t0 = range_to_bin(rr.path, cfg) if rr.path.size else np.zeros(0)
    inside = t0 < T
    dropped = int(np.count_nonzero(~inside))
    keep = np.flatnonzero(inside)
    rr = RayReturns(rr.ray[keep], rr.path[keep], rr.factor[keep], rr.label[keep],
                    rr.glass_id[keep], rr.surface_id[keep], rr.hit_point[keep])
    t0 = t0[keep]
    amp = scene.amplitude_scale * rr.factor / rr.path ** 2

    values = np.zeros((H * W, T))
    t = np.arange(T, dtype=np.float64)
    s2 = 2.0 * cfg.pulse_sigma ** 2
    # scalar accumulation in return order keeps the sum schedule-independent
    for q in range(rr.ray.size):
        values[rr.ray[q]] += amp[q] * np.exp(-(t - t0[q]) ** 2 / s2)
    if scene.ambient_rate > 0:
        for p in range(H * W):
            values[p] += pixel_rng(scene.rng_seed, frame_index, p).poisson(scene.ambient_rate, T)

    width = np.full(rr.ray.size, FWHM_PER_SIGMA * cfg.pulse_sigma)
    lab = kernels.expand_labels(rr.ray, t0, width, rr.label, H * W, T, int(PeakClass.NOISE))
    fid = frame_id if frame_id is not None else str(frame_index)
    frame = FwlFrame(values.reshape(H, W, T), pose, fid)
    peaks = PeakTable(rr.ray // W, rr.ray % W, t0, amp, width, rr.label)
    return SynthResult(frame, LabelVolume(lab.reshape(H, W, T)), peaks, rr, dropped)


def synth_sequence(scene: Scene, trajectory: Trajectory, cfg: SensorConfig) -> list[SynthResult]:
    return [synth_frame(scene, pose, cfg, frame_index=i) for i, pose in enumerate(trajectory)]


# -- scene helpers ----------------------------------------------------------

def map_points(scene: Scene, spacing: float = 0.1) -> PointCloud:
    """Dense samples of every opaque surface: a ghost-free reference map."""
    pts = [s.sample(spacing) for s in scene.surfaces if not s.is_glass]
    if not pts:
        return PointCloud(np.zeros((0, 3)))
    xyz = np.concatenate(pts)
    return PointCloud(xyz, labels=np.full(len(xyz), int(PeakClass.OBJECT)))


def random_glass_scene(rng: np.random.Generator, ambient_rate: float = 0.02,
                       amplitude_scale: float = 150.0, rng_seed: int = 0, back_wall: bool = True) -> Scene:
    """Procedural corridor for the toy sensor (range < 19 m, 60 deg FOV).

    An oblique glass pane ahead reflects part of the beams onto a side wall;
    an opaque back wall sits behind the glass, and an optional pillar in front
    of the glass occludes part of it. The side wall stops short of the pane
    so that no ghost lands on real geometry at the junction. ``back_wall``
    only controls whether the back wall is kept; the draws are unchanged.
    """
    gx = rng.uniform(4.0, 7.0)
    yaw = rng.choice([-1.0, 1.0]) * rng.uniform(math.radians(20), math.radians(35))
    nrm = np.array([-math.cos(yaw), -math.sin(yaw), 0.0])
    glass = Surface((gx, rng.uniform(-0.5, 0.5), 0.0), tuple(nrm),
                    (rng.uniform(2.0, 3.5), 3.0),
                    Glass(rng.uniform(0.25, 0.45), rng.uniform(0.4, 0.55)), name="glass")
    back = Surface((gx + rng.uniform(3.0, 7.0), 0.0, 0.0), (-1.0, 0.0, 0.0), (12.0, 6.0),
                   Opaque(rng.uniform(0.5, 0.9)), name="back")
    # side wall on the side the pane reflects towards
    side_y = -math.copysign(1.0, yaw) * rng.uniform(2.5, 5.0)
    side_end = gx - 1.0
    side = Surface(((side_end - 2.0) / 2, side_y, 0.0), (0.0, -math.copysign(1.0, side_y), 0.0),
                   ((side_end + 2.0) / 2, 4.0), Opaque(rng.uniform(0.6, 0.95)), name="side")
    surfaces = [glass, back, side] if back_wall else [glass, side]
    if rng.uniform() < 0.5:
        px = rng.uniform(2.0, gx - 1.0)
        pillar = Surface((px, rng.uniform(-1.5, 1.5), 0.0), (-1.0, 0.0, 0.0),
                         (rng.uniform(0.3, 0.8), 4.0), Opaque(rng.uniform(0.4, 0.9)), name="pillar")
        surfaces.append(pillar)
    return Scene(tuple(surfaces), ambient_rate, amplitude_scale, rng_seed)
