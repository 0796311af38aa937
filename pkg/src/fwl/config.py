"""Pipeline configuration: one TOML file with explicit units in key names.

``validate_config`` returns every problem it can find with file/line
locations instead of stopping at the first; ``load_config`` raises
:class:`ConfigError` carrying the same diagnostics.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .core import SensorConfig
from .io import FormatError, load_toml
from .nn.model import MaeConfig, TrainConfig
from .signal import PreprocessSpec

STAGES = ("synth", "labels", "preprocess", "pretrain", "finetune", "infer", "eval")
LABEL_SOURCES = ("gt", "annotate")
GENERATORS = ("random_glass", "paths")


@dataclass(frozen=True)
class Diagnostic:
    file: str
    line: int
    field: str
    message: str

    def __str__(self):
        return f"{self.file}:{self.line}: {self.field}: {self.message}"


class ConfigError(ValueError):
    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("\n".join(str(d) for d in self.diagnostics))


@dataclass(frozen=True)
class SceneSpec:
    generator: str = "random_glass"
    paths: tuple = ()
    ambient_rate_per_bin: float = 0.02
    amplitude_scale: float = 3000.0
    views_per_scene: int = 4
    yaw_jitter_rad: float = 0.15
    offset_jitter_m: float = 0.5
    back_wall: bool = True


@dataclass(frozen=True)
class AnnotateSpec:
    labels: str = "gt"
    tau_m: float = 0.5
    accumulate_frames: int = 8
    peak_threshold: float = 0.5
    map_spacing_m: float = 0.1


@dataclass(frozen=True)
class EvalSpec:
    label_threshold: float = 0.5
    peak_threshold: float = 0.5
    removal_radius_m: float = 0.001
    heuristic_glass_amp_ratio: float = 1.0
    oracle: bool = False


@dataclass(frozen=True)
class PipelineConfig:
    sensor: SensorConfig = field(default_factory=SensorConfig.toy)
    preprocess: PreprocessSpec = field(default_factory=lambda: PreprocessSpec(0, 0, 64, 32))
    scenes: SceneSpec = field(default_factory=SceneSpec)
    split: dict = field(default_factory=lambda: {"train": tuple(range(50)), "val": (),
                                                 "test": tuple(range(1000, 1010))})
    annotate: AnnotateSpec = field(default_factory=AnnotateSpec)
    model: MaeConfig = field(default_factory=lambda: MaeConfig(input_scale=0.1))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=30))
    finetune_epochs: int = 30
    eval: EvalSpec = field(default_factory=EvalSpec)
    seed: int = 0
    stages: tuple = STAGES
    base_dir: str = "."

    def __post_init__(self):
        diags = check_config(self, "<config>")
        if diags:
            raise ConfigError(diags)

    def to_dict(self) -> dict:
        d = {
            "sensor": asdict(self.sensor), "preprocess": asdict(self.preprocess),
            "scenes": asdict(self.scenes), "split": {k: list(v) for k, v in sorted(self.split.items())},
            "annotate": asdict(self.annotate), "model": self.model.to_dict(), "train": self.train.to_dict(),
            "finetune_epochs": self.finetune_epochs, "eval": asdict(self.eval), "seed": self.seed,
            "stages": list(self.stages),
        }
        d["scenes"]["paths"] = list(self.scenes.paths)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def scene_ids(self) -> list:
        return sorted({i for ids in self.split.values() for i in ids})


# -- schema -------------------------------------------------------------------
# section -> key -> (type, constraint, message); constraint None means any value of the type

def _pos(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _unit(v):
    return 0 <= v <= 1


SCHEMA = {
    "": {"seed": (int, _nonneg, "must be >= 0"), "stages": (list, None, "")},
    "sensor": {
        "rows": (int, _pos, "must be >= 1"), "cols": (int, _pos, "must be >= 1"),
        "bins": (int, _pos, "must be >= 1"), "bin_duration_s": (float, _pos, "must be positive"),
        "max_range_m": (float, _pos, "must be positive"),
        "v_fov_deg": (float, lambda v: 0 < v < 180, "must lie in (0, 180)"),
        "h_fov_deg": (float, lambda v: 0 < v < 180, "must lie in (0, 180)"),
        "pulse_sigma_bins": (float, _pos, "must be positive"),
    },
    "preprocess": {
        "row_crop_px": (int, _nonneg, "must be >= 0"), "front_bin_crop_bins": (int, _nonneg, "must be >= 0"),
        "target_bins": (int, _pos, "must be >= 1"), "tile_px": (int, _pos, "must be >= 1"),
    },
    "scenes": {
        "generator": (str, lambda v: v in GENERATORS, f"must be one of {GENERATORS}"),
        "paths": (list, None, ""), "ambient_rate_per_bin": (float, _nonneg, "must be >= 0"),
        "amplitude_scale": (float, _pos, "must be positive"), "views_per_scene": (int, _pos, "must be >= 1"),
        "yaw_jitter_rad": (float, _nonneg, "must be >= 0"), "offset_jitter_m": (float, _nonneg, "must be >= 0"),
        "back_wall": (bool, None, ""),
    },
    "split": {"train": (list, None, ""), "val": (list, None, ""), "test": (list, None, "")},
    "annotate": {
        "labels": (str, lambda v: v in LABEL_SOURCES, f"must be one of {LABEL_SOURCES}"),
        "tau_m": (float, _pos, "must be positive"), "accumulate_frames": (int, _pos, "must be >= 1"),
        "peak_threshold": (float, _pos, "must be positive"), "map_spacing_m": (float, _pos, "must be positive"),
    },
    "model": {
        "patch": (list, None, ""), "input_hw": (list, None, ""), "input_T": (int, _pos, "must be >= 1"),
        "d_enc": (int, _pos, "must be >= 1"), "d_dec": (int, _pos, "must be >= 1"),
        "blocks_enc": (int, _pos, "must be >= 1"), "blocks_dec": (int, _pos, "must be >= 1"),
        "heads": (int, _pos, "must be >= 1"), "mlp_ratio": (int, _pos, "must be >= 1"),
        "mask_ratio": (float, lambda v: 0 < v < 1, "must lie in (0, 1)"), "K": (int, _pos, "must be >= 1"),
        "lambda_p": (float, _nonneg, "must be >= 0"), "lambda_a": (float, _nonneg, "must be >= 0"),
        "lambda_w": (float, _nonneg, "must be >= 0"), "dropout": (float, lambda v: 0 <= v < 1, "must lie in [0, 1)"),
        "peak_threshold": (float, _pos, "must be positive"), "input_scale": (float, _pos, "must be positive"),
    },
    "train": {
        "lr": (float, _pos, "must be positive"), "beta1": (float, lambda v: 0 <= v < 1, "must lie in [0, 1)"),
        "beta2": (float, lambda v: 0 <= v < 1, "must lie in [0, 1)"), "eps": (float, _pos, "must be positive"),
        "weight_decay": (float, _nonneg, "must be >= 0"), "batch": (int, _pos, "must be >= 1"),
        "pretrain_epochs": (int, _nonneg, "must be >= 0"), "finetune_epochs": (int, _nonneg, "must be >= 0"),
        "focal_alpha": (list, None, ""), "focal_gamma": (float, _nonneg, "must be >= 0"),
    },
    "eval": {
        "label_threshold": (float, _unit, "must lie in [0, 1]"), "peak_threshold": (float, _pos, "must be positive"),
        "removal_radius_m": (float, _pos, "must be positive"),
        "heuristic_glass_amp_ratio": (float, _pos, "must be positive"), "oracle": (bool, None, ""),
    },
}


def _type_ok(v, typ) -> bool:
    if typ is float:
        return isinstance(v, (int, float)) and not isinstance(v, bool)
    if typ is int:
        return isinstance(v, int) and not isinstance(v, bool)
    return isinstance(v, typ)


class _Locator:
    """Maps ``section.key`` to the line where it is written."""

    def __init__(self, text: str):
        self.lines = text.splitlines()
        self.index = {}
        section = ""
        for n, raw in enumerate(self.lines, 1):
            line = raw.split("#", 1)[0].strip()
            m = re.match(r"^\[+\s*([^\]]+?)\s*\]+$", line)
            if m:
                section = m.group(1)
                self.index.setdefault((section, ""), n)
                continue
            m = re.match(r"^([A-Za-z0-9_\-]+)\s*=", line)
            if m:
                self.index.setdefault((section, m.group(1)), n)

    def line(self, section: str, key: str = "") -> int:
        return self.index.get((section, key)) or self.index.get((section, ""), 1)


def _scene_ids(v, where, diags, file, line):
    """Split entries: ``{first = a, count = n}`` or a list of ints and such ranges."""
    if isinstance(v, dict):
        if set(v) != {"first", "count"} or not all(_type_ok(x, int) for x in v.values()) or v["count"] < 0:
            diags.append(Diagnostic(file, line, where, "range form is {first = <int>, count = <int >= 0>}"))
            return ()
        return tuple(range(v["first"], v["first"] + v["count"]))
    if not isinstance(v, list):
        diags.append(Diagnostic(file, line, where, "must be a list of integer scene ids or {first, count}"))
        return ()
    if any(isinstance(x, dict) for x in v):
        v = [i for x in v for i in (_scene_ids(x, where, diags, file, line) if isinstance(x, dict) else [x])]
    if not all(_type_ok(x, int) for x in v):
        diags.append(Diagnostic(file, line, where, "must be a list of integer scene ids or {first, count}"))
        return ()
    if len(set(v)) != len(v):
        diags.append(Diagnostic(file, line, where, "repeats a scene id"))
    return tuple(v)


def _parse(data: dict, loc: _Locator, file: str):
    """Typed values per section plus per-field diagnostics."""
    diags, out = [], {}
    for section, value in data.items():
        if section in SCHEMA and section != "" and isinstance(value, dict):
            continue
        if section not in SCHEMA[""]:
            diags.append(Diagnostic(file, loc.line("", section), section, "unknown key or section"))
    for section, fields in SCHEMA.items():
        src = data if section == "" else data.get(section, {})
        if not isinstance(src, dict):
            diags.append(Diagnostic(file, loc.line("", section), section, "must be a table"))
            continue
        vals = {}
        for key, v in src.items():
            if section == "" and key in SCHEMA and key != "":
                continue
            name = f"{section}.{key}" if section else key
            line = loc.line(section, key)
            if key not in fields:
                if section:
                    diags.append(Diagnostic(file, line, name, "unknown key"))
                continue
            typ, ok, msg = fields[key]
            if section == "split":
                vals[key] = _scene_ids(v, name, diags, file, line)
                continue
            if not _type_ok(v, typ):
                diags.append(Diagnostic(file, line, name, f"expected {typ.__name__}, got {type(v).__name__}"))
                continue
            if ok is not None and not ok(v):
                diags.append(Diagnostic(file, line, name, f"{msg} (got {v!r})"))
                continue
            vals[key] = v
        out[section] = vals
    return out, diags


def _build(vals: dict, loc: _Locator, file: str, base_dir: str):
    diags = []

    def make(section, factory, **kw):
        try:
            return factory(**kw)
        except (ValueError, TypeError) as e:
            # point at the first field the message names, else at the section header
            msg = str(e)
            keys = [k for k in vals.get(section, {}) if re.search(rf"\b{re.escape(k)}\b", msg)]
            key = min(keys, key=msg.find) if keys else ""
            diags.append(Diagnostic(file, loc.line(section, key), f"{section}.{key}" if key else section, msg))
            return None

    s = vals.get("sensor", {})
    toy = SensorConfig.toy()
    sensor = make("sensor", SensorConfig, rows=s.get("rows", toy.rows), cols=s.get("cols", toy.cols),
                  bins=s.get("bins", toy.bins), bin_duration=float(s.get("bin_duration_s", toy.bin_duration)),
                  max_range=float(s.get("max_range_m", toy.max_range)), v_fov=float(s.get("v_fov_deg", toy.v_fov)),
                  h_fov=float(s.get("h_fov_deg", toy.h_fov)),
                  pulse_sigma=float(s.get("pulse_sigma_bins", toy.pulse_sigma)))
    p = vals.get("preprocess", {})
    pre = make("preprocess", PreprocessSpec, row_crop=p.get("row_crop_px", 0),
               front_bin_crop=p.get("front_bin_crop_bins", 0), target_T=p.get("target_bins", 64),
               tile_hw=p.get("tile_px", 32))
    sc = dict(vals.get("scenes", {}))
    if "paths" in sc:
        sc["paths"] = tuple(str(x) for x in sc["paths"])
    for k in ("ambient_rate_per_bin", "amplitude_scale", "yaw_jitter_rad", "offset_jitter_m"):
        if k in sc:
            sc[k] = float(sc[k])
    scenes = make("scenes", SceneSpec, **sc)
    an = {k: (float(v) if k in ("tau_m", "peak_threshold", "map_spacing_m") else v)
          for k, v in vals.get("annotate", {}).items()}
    annotate = make("annotate", AnnotateSpec, **an)
    m = dict(vals.get("model", {}))
    m.setdefault("input_scale", 0.1)
    model = make("model", MaeConfig, **m)
    t = dict(vals.get("train", {}))
    finetune_epochs = t.pop("finetune_epochs", 30)
    t["epochs"] = t.pop("pretrain_epochs", 30)
    t["seed"] = vals.get("", {}).get("seed", 0)
    train = make("train", TrainConfig, **t)
    ev = {k: (float(v) if k != "oracle" else v) for k, v in vals.get("eval", {}).items()}
    evs = make("eval", EvalSpec, **ev)
    split = {"train": (), "val": (), "test": ()}
    split.update(vals.get("split", {}))
    top = vals.get("", {})
    stages = top.get("stages", list(STAGES))
    if None in (sensor, pre, scenes, annotate, model, train, evs):
        return None, diags
    kw = dict(sensor=sensor, preprocess=pre, scenes=scenes, split=split, annotate=annotate, model=model,
              train=train, finetune_epochs=finetune_epochs, eval=evs, seed=top.get("seed", 0),
              stages=tuple(stages), base_dir=base_dir)
    return kw, diags


def check_config(cfg: PipelineConfig, file: str, loc: _Locator | None = None) -> list:
    """Cross-module constraints of an assembled configuration."""
    loc = loc or _Locator("")
    d = []

    def add(section, key, msg):
        d.append(Diagnostic(file, loc.line(section, key), f"{section}.{key}" if section else key, msg))

    bad = [s for s in cfg.stages if s not in STAGES]
    if bad:
        add("", "stages", f"unknown stages {bad}; known: {list(STAGES)}")
    elif list(cfg.stages) != [s for s in STAGES if s in cfg.stages]:
        add("", "stages", f"stages must follow the order {list(STAGES)}")
    try:
        cfg.preprocess.check(cfg.sensor.rows, cfg.sensor.bins)
    except ValueError as e:
        add("preprocess", "target_bins", str(e))
    if cfg.preprocess.tile_hw != cfg.model.input_hw[0] or cfg.preprocess.tile_hw != cfg.model.input_hw[1]:
        add("preprocess", "tile_px", f"tile {cfg.preprocess.tile_hw} must equal model input_hw {cfg.model.input_hw}")
    if cfg.preprocess.target_T != cfg.model.input_T:
        add("preprocess", "target_bins", f"{cfg.preprocess.target_T} must equal model input_T {cfg.model.input_T}")
    train, val, test = (set(cfg.split.get(k, ())) for k in ("train", "val", "test"))
    seen = train | val
    if test & seen:
        add("split", "test", f"scene ids {sorted(test & seen)} also appear in train/val; "
                             "test scenes must be unseen during training")
    if train & val:
        add("split", "val", f"scene ids {sorted(train & val)} appear in both train and val")
    needs_train = any(s in cfg.stages for s in ("pretrain", "finetune"))
    if needs_train and not train:
        add("split", "train", "training stages need at least one train scene")
    if "eval" in cfg.stages and not test:
        add("split", "test", "eval needs at least one test scene")
    if cfg.scenes.generator == "paths":
        n = len(cfg.scenes.paths)
        out = sorted(i for i in train | val | test if not 0 <= i < n)
        if out:
            add("scenes", "paths", f"scene ids {out} do not index the {n} listed scene files")
    if any(i < 0 for i in train | val | test):
        add("split", "train", "scene ids must be >= 0")
    return d


def validate_config(path) -> list:
    """All diagnostics for a config file; an empty list means it is valid."""
    path = Path(path)
    file = str(path)
    try:
        text = path.read_text()
    except OSError as e:
        return [Diagnostic(file, 0, "<file>", str(e))]
    try:
        data = load_toml(path)
    except FormatError as e:
        m = re.search(r"line (\d+)", str(e))
        return [Diagnostic(file, int(m.group(1)) if m else 1, "<syntax>", str(e))]
    loc = _Locator(text)
    vals, diags = _parse(data, loc, file)
    kw, more = _build(vals, loc, file, str(path.parent))
    diags += more
    if kw is not None:
        cfg = object.__new__(PipelineConfig)
        for k, v in kw.items():
            object.__setattr__(cfg, k, v)
        diags += check_config(cfg, file, loc)
    return sorted(diags, key=lambda x: (x.line, x.field))


def load_config(path) -> PipelineConfig:
    diags = validate_config(path)
    if diags:
        raise ConfigError(diags)
    path = Path(path)
    vals, _ = _parse(load_toml(path), _Locator(path.read_text()), str(path))
    kw, _ = _build(vals, _Locator(""), str(path), str(path.parent))
    return PipelineConfig(**kw)


def config_to_toml(cfg: PipelineConfig) -> str:
    """Inverse of :func:`load_config` for the fields it reads."""

    def val(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return json.dumps(v)
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(val(x) for x in v) + "]"
        if isinstance(v, float):
            return repr(v)
        return str(v)

    s, p, m, t = cfg.sensor, cfg.preprocess, cfg.model, cfg.train
    sections = {
        "sensor": {"rows": s.rows, "cols": s.cols, "bins": s.bins, "bin_duration_s": s.bin_duration,
                   "max_range_m": s.max_range, "v_fov_deg": s.v_fov, "h_fov_deg": s.h_fov,
                   "pulse_sigma_bins": s.pulse_sigma},
        "preprocess": {"row_crop_px": p.row_crop, "front_bin_crop_bins": p.front_bin_crop,
                       "target_bins": p.target_T, "tile_px": p.tile_hw},
        "scenes": {k: (list(v) if k == "paths" else v) for k, v in asdict(cfg.scenes).items()},
        "split": {k: list(v) for k, v in cfg.split.items()},
        "annotate": asdict(cfg.annotate),
        "model": {k: v for k, v in m.to_dict().items() if k != "classes"},
        "train": {"lr": t.lr, "beta1": t.beta1, "beta2": t.beta2, "eps": t.eps, "weight_decay": t.weight_decay,
                  "batch": t.batch, "pretrain_epochs": t.epochs, "finetune_epochs": cfg.finetune_epochs,
                  "focal_alpha": list(t.focal_alpha), "focal_gamma": t.focal_gamma},
        "eval": asdict(cfg.eval),
    }
    out = [f"seed = {cfg.seed}", f"stages = {val(list(cfg.stages))}", ""]
    for name, kv in sections.items():
        out.append(f"[{name}]")
        out += [f"{k} = {val(v)}" for k, v in kv.items()]
        out.append("")
    return "\n".join(out)
