"""Readers/writers for frames, label volumes, point clouds, trajectories, peaks, scenes and regions.

Binary layouts (little-endian):

* frame:  ``b"FWL1" | u32 H | u32 W | u32 T | f32[H*W*T]`` (row-major h, w, t)
* labels: ``b"FWLL" | u32 H | u32 W | u32 T | u8[H*W*T]``
* both may end with ``b"TMAP" | u32 count | u32[count]``
"""
from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .core import (FwlFrame, LabelVolume, OrientedBox, PeakClass, PeakTable, PointCloud, Pose,
                   Trajectory)

FRAME_MAGIC = b"FWL1"
LABEL_MAGIC = b"FWLL"
TMAP_MAGIC = b"TMAP"


class FormatError(ValueError):
    pass


def _tmap_bytes(tmap) -> bytes:
    if tmap is None:
        return b""
    tmap = np.asarray(tmap, dtype="<u4")
    return TMAP_MAGIC + struct.pack("<I", tmap.size) + tmap.tobytes()


def _read_header(buf: bytes, magic: bytes, path) -> tuple:
    if len(buf) < 16 or buf[:4] != magic:
        raise FormatError(f"{path}: missing {magic!r} header")
    return struct.unpack_from("<III", buf, 4)


def _read_tmap(buf: bytes, off: int, path):
    if off == len(buf):
        return None
    if buf[off:off + 4] != TMAP_MAGIC:
        raise FormatError(f"{path}: unexpected trailing bytes at offset {off}")
    (count,) = struct.unpack_from("<I", buf, off + 4)
    body = buf[off + 8:]
    if len(body) != 4 * count:
        raise FormatError(f"{path}: TMAP trailer length mismatch")
    return np.frombuffer(body, dtype="<u4").astype(np.int64)


def frame_to_bytes(frame: FwlFrame) -> bytes:
    H, W, T = frame.dims
    vals = np.ascontiguousarray(frame.values, dtype="<f4")
    return FRAME_MAGIC + struct.pack("<III", H, W, T) + vals.tobytes() + _tmap_bytes(frame.t_index_map)


def frame_from_bytes(buf: bytes, pose: Pose | None = None, frame_id: str = "0", path="<bytes>") -> FwlFrame:
    H, W, T = _read_header(buf, FRAME_MAGIC, path)
    n = H * W * T
    end = 16 + 4 * n
    if len(buf) < end:
        raise FormatError(f"{path}: truncated voxel data")
    vals = np.frombuffer(buf, dtype="<f4", count=n, offset=16).astype(np.float64).reshape(H, W, T)
    return FwlFrame(vals, pose or Pose(), frame_id, _read_tmap(buf, end, path))


def write_frame(path, frame: FwlFrame) -> None:
    Path(path).write_bytes(frame_to_bytes(frame))


def read_frame(path, pose: Pose | None = None) -> FwlFrame:
    p = Path(path)
    return frame_from_bytes(p.read_bytes(), pose, p.stem, path=p)


def labels_to_bytes(lv: LabelVolume) -> bytes:
    H, W, T = lv.dims
    return (LABEL_MAGIC + struct.pack("<III", H, W, T)
            + np.ascontiguousarray(lv.labels, dtype=np.uint8).tobytes() + _tmap_bytes(lv.t_index_map))


def labels_from_bytes(buf: bytes, path="<bytes>") -> LabelVolume:
    H, W, T = _read_header(buf, LABEL_MAGIC, path)
    end = 16 + H * W * T
    if len(buf) < end:
        raise FormatError(f"{path}: truncated label data")
    lab = np.frombuffer(buf, dtype=np.uint8, count=H * W * T, offset=16).reshape(H, W, T)
    return LabelVolume(lab.copy(), _read_tmap(buf, end, path))


def write_labels(path, lv: LabelVolume) -> None:
    Path(path).write_bytes(labels_to_bytes(lv))


def read_labels(path) -> LabelVolume:
    return labels_from_bytes(Path(path).read_bytes(), path)


# -- point clouds -----------------------------------------------------------

def write_ply(path, cloud: PointCloud) -> None:
    lines = [
        "ply", "format ascii 1.0", f"element vertex {len(cloud)}",
        "property double x", "property double y", "property double z",
        "property int row", "property int col", "property double bin",
        "property uchar label", "end_header",
    ]
    for (x, y, z), (r, c, b), lab in zip(cloud.xyz, cloud.source, cloud.labels):
        lines.append(f"{float(x)!r} {float(y)!r} {float(z)!r} {int(r)} {int(c)} {float(b)!r} {int(lab)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path) -> PointCloud:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise FormatError(f"{path}: not a PLY file")
    props, n, i = [], None, 1
    while i < len(text) and text[i].strip() != "end_header":
        tok = text[i].split()
        if tok[:1] == ["format"] and tok[1] != "ascii":
            raise FormatError(f"{path}: only ASCII PLY is supported")
        if tok[:2] == ["element", "vertex"]:
            n = int(tok[2])
        elif tok[:1] == ["property"]:
            props.append(tok[-1])
        i += 1
    if n is None or i == len(text):
        raise FormatError(f"{path}: malformed PLY header")
    rows = text[i + 1:i + 1 + n]
    if len(rows) != n:
        raise FormatError(f"{path}: expected {n} vertices, found {len(rows)}")
    data = np.array([[float(v) for v in r.split()] for r in rows], dtype=np.float64).reshape(n, len(props))
    col = {p: data[:, k] for k, p in enumerate(props)}
    xyz = np.stack([col["x"], col["y"], col["z"]], axis=1)
    src = None
    if {"row", "col", "bin"} <= col.keys():
        src = np.stack([col["row"], col["col"], col["bin"]], axis=1)
    labels = col["label"].astype(np.uint8) if "label" in col else None
    return PointCloud(xyz, src, labels)


# -- trajectories -----------------------------------------------------------

def write_tum(path, traj: Trajectory) -> None:
    out = []
    for p in traj:
        tx, ty, tz = p.translation
        qx, qy, qz, qw = p.rotation
        out.append(" ".join(repr(float(v)) for v in (p.timestamp, tx, ty, tz, qx, qy, qz, qw)))
    Path(path).write_text("\n".join(out) + "\n")


def read_tum(path) -> Trajectory:
    poses = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        v = line.replace(",", " ").split()
        if len(v) != 8:
            raise FormatError(f"{path}:{ln}: expected 8 fields, got {len(v)}")
        t, tx, ty, tz, qx, qy, qz, qw = map(float, v)
        q = np.array([qx, qy, qz, qw])
        poses.append(Pose(tuple(q / np.linalg.norm(q)), (tx, ty, tz), t))
    return Trajectory(tuple(poses))


# -- peaks ------------------------------------------------------------------

PEAK_FIELDS = ("pixel_row", "pixel_col", "position_bin", "amplitude", "width_bins", "class")


def write_peaks_csv(path, peaks: PeakTable) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PEAK_FIELDS)
        for r, c, p, a, wd, lab in zip(peaks.rows, peaks.cols, peaks.position, peaks.amplitude,
                                       peaks.width, peaks.label):
            w.writerow([int(r), int(c), repr(float(p)), repr(float(a)), repr(float(wd)),
                        PeakClass(int(lab)).name.capitalize()])


def read_peaks_csv(path) -> PeakTable:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return PeakTable.empty()
    missing = set(PEAK_FIELDS) - set(rows[0])
    if missing:
        raise FormatError(f"{path}: missing columns {sorted(missing)}")
    return PeakTable([int(r["pixel_row"]) for r in rows], [int(r["pixel_col"]) for r in rows],
                     [float(r["position_bin"]) for r in rows], [float(r["amplitude"]) for r in rows],
                     [float(r["width_bins"]) for r in rows],
                     [int(PeakClass.parse(r["class"])) for r in rows])


# -- structured text --------------------------------------------------------

def load_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as e:
        raise FormatError(f"{path}: {e}") from e


def scene_from_dict(d: dict, source="<scene>"):
    from .synth import Glass, Opaque, Scene, Surface

    surfaces = []
    for i, s in enumerate(d.get("surface", [])):
        kind = s.get("kind", "opaque")
        try:
            if kind == "opaque":
                mat = Opaque(float(s["reflectance"]))
            elif kind == "glass":
                mat = Glass(float(s["surface_reflectance"]), float(s["transmittance"]),
                            s.get("surface_echo"))
            else:
                raise FormatError(f"{source}: surface {i}: unknown kind {kind!r}")
            surfaces.append(Surface(tuple(s["point_m"]), tuple(s["normal"]), tuple(s["half_extents_m"]),
                                    mat, tuple(s["u_axis"]) if "u_axis" in s else None,
                                    s.get("name", f"s{i}")))
        except KeyError as e:
            raise FormatError(f"{source}: surface {i}: missing key {e}") from e
    return Scene(tuple(surfaces), float(d.get("ambient_rate_per_bin", 0.0)),
                 float(d.get("amplitude_scale", 1.0)), int(d.get("rng_seed", 0)))


def _num(v) -> str:
    return repr(float(v))


def _vec(vs) -> str:
    return "[" + ", ".join(_num(v) for v in vs) + "]"


def scene_to_toml(scene) -> str:
    out = [f"ambient_rate_per_bin = {_num(scene.ambient_rate)}",
           f"amplitude_scale = {_num(scene.amplitude_scale)}", f"rng_seed = {scene.rng_seed}", ""]
    for s in scene.surfaces:
        out.append("[[surface]]")
        out.append(f'name = "{s.name}"')
        if s.is_glass:
            m = s.material
            out += ['kind = "glass"', f"surface_reflectance = {_num(m.surface_reflectance)}",
                    f"transmittance = {_num(m.transmittance)}", f"surface_echo = {_num(m.surface_echo)}"]
        else:
            out += ['kind = "opaque"', f"reflectance = {_num(s.material.reflectance)}"]
        out.append(f"point_m = {_vec(s.point)}")
        out.append(f"normal = {_vec(s.normal)}")
        out.append(f"u_axis = {_vec(s.u_axis)}")
        out.append(f"half_extents_m = {_vec(s.half_extents)}")
        out.append("")
    return "\n".join(out)


def read_scene(path):
    return scene_from_dict(load_toml(path), source=path)


def write_scene(path, scene) -> None:
    Path(path).write_text(scene_to_toml(scene))


def read_regions(path) -> dict:
    """Region file: ``[[box]]`` tables plus optional ``tau_m`` and ``alignment`` keys."""
    d = load_toml(path)
    boxes = []
    for i, b in enumerate(d.get("box", [])):
        try:
            boxes.append(OrientedBox(tuple(b["center_m"]), tuple(tuple(r) for r in b["axes"]),
                                     tuple(b["half_extents_m"]), str(b["kind"]).upper(),
                                     int(b.get("pair_id", 0))))
        except KeyError as e:
            raise FormatError(f"{path}: box {i}: missing key {e}") from e
    for b in boxes:
        if b.kind not in ("G", "R"):
            raise FormatError(f"{path}: box kind must be G or R, got {b.kind!r}")
    al = d.get("alignment", {})
    pose = Pose(tuple(al.get("quat_xyzw", (0, 0, 0, 1))), tuple(al.get("translation_m", (0, 0, 0))))
    return {"glass": [b for b in boxes if b.kind == "G"], "reflection": [b for b in boxes if b.kind == "R"],
            "tau_m": float(d.get("tau_m", 0.5)), "alignment": pose}


def write_regions(path, glass, reflection, tau_m=0.5, alignment: Pose | None = None) -> None:
    out = [f"tau_m = {_num(tau_m)}", ""]
    if alignment is not None:
        out += ["[alignment]", f"quat_xyzw = {_vec(alignment.rotation)}",
                f"translation_m = {_vec(alignment.translation)}", ""]
    for b in list(glass) + list(reflection):
        out += ["[[box]]", f'kind = "{b.kind}"', f"pair_id = {b.pair_id}",
                f"center_m = {_vec(b.center)}", "axes = [" + ", ".join(_vec(r) for r in b.axes) + "]",
                f"half_extents_m = {_vec(b.half_extents)}", ""]
    Path(path).write_text("\n".join(out))

