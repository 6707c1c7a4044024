"""Command-line driver: config validation, pipeline stages and the end-to-end run.

Every stage reads and writes files inside the output directory, so stages can
be run one at a time (`nightfuse train ...` after `nightfuse prepare ...`) or
all together with `nightfuse run`.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
import types
import typing
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .bench import precision_report, write_bench_csv
from .dataset import SynthParams, load_pairs, save_pairs, synth_pair
from .errors import ConfigError, NightfuseError, ParameterError, StageError
from .evaluate import (
    evaluate_pair,
    fmt,
    metrics_row,
    radial_psd,
    spectrum_distance,
    write_metrics_csv,
    write_spectrum_csv,
)
from .network import NetConfig, init, load_checkpoint, save_checkpoint
from .pipeline import make_split, preprocess
from .raster import Grid, Units, load_grid, normalize_signed, save_grid
from .sample import DEFAULT_STEPS, METHODS, SamplerSpec, fuse_full
from .schedule import from_config
from .train import TrainConfig, train

log = logging.getLogger(__name__)

DEFAULT_METHODS = ("ddim", "lcm", "edm_heun", "pf_euler", "pf_heun", "fm_euler")
BASELINE = "viirs"
STAGES = ("synth", "prepare", "train", "fuse", "eval", "psd", "bench", "report")
_SCHEDULE_KEYS = {"linear": {"kind", "T", "b1", "bT"}, "cosine": {"kind", "T", "s", "beta_max"}}


# ---------------------------------------------------------------- config

@dataclass(frozen=True)
class DataConfig:
    viirs: Path | None = None
    dmsp: Path | None = None
    synth: SynthParams = field(default_factory=SynthParams)
    floor: float = 0.5
    r_hi_percentile: float = 99.5
    r_hi: float | None = None
    patch: int = 32
    n_val: int = 50


@dataclass(frozen=True)
class BenchConfig:
    precisions: tuple[str, ...] = ("full32", "half16")
    int8_method: str | None = None
    methods: tuple[SamplerSpec, ...] | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    output: Path
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    network: NetConfig = field(default_factory=NetConfig)
    schedule: dict = field(default_factory=lambda: {"kind": "linear", "T": 1000})
    train: dict = field(default_factory=dict)
    methods: tuple[SamplerSpec, ...] = ()
    batch_size: int = 64
    band: tuple[int, int] | None = None
    bench: BenchConfig = field(default_factory=BenchConfig)
    precision: str = "full32"
    deterministic: bool = False

    def objectives(self) -> list[str]:
        needed = {s.objective for s in self.methods}
        return [o for o in ("noise", "velocity") if o in needed]

    def to_dict(self) -> dict:
        def spec(s):
            return {"method": s.method, "steps": s.steps, "seed": s.seed, "eta": s.eta, "clip_x0": s.clip_x0}

        d = self.data
        return {
            "output": str(self.output),
            "seed": self.seed,
            "data": {
                "viirs": None if d.viirs is None else str(d.viirs),
                "dmsp": None if d.dmsp is None else str(d.dmsp),
                "synth": dataclasses.asdict(d.synth),
                "floor": d.floor,
                "r_hi_percentile": d.r_hi_percentile,
                "r_hi": d.r_hi,
                "patch": d.patch,
                "n_val": d.n_val,
            },
            "network": {k: v for k, v in dataclasses.asdict(self.network).items() if k != "patch"},
            "schedule": dict(self.schedule),
            "train": {o: {k: v for k, v in dataclasses.asdict(c).items() if k != "objective"}
                      for o, c in self.train.items()},
            "sample": {"methods": [spec(s) for s in self.methods], "batch_size": self.batch_size},
            "eval": {"band": None if self.band is None else list(self.band)},
            "bench": {
                "precisions": list(self.bench.precisions),
                "int8_method": self.bench.int8_method,
                "methods": None if self.bench.methods is None else [spec(s) for s in self.bench.methods],
            },
            "precision": self.precision,
            "deterministic": self.deterministic,
        }


def derive_seed(seed: int, label: str) -> int:
    """Named child seed: the same (seed, label) always gives the same value."""
    ss = np.random.SeedSequence([seed, zlib.crc32(label.encode())])
    return int(ss.generate_state(1, np.uint32)[0])


def _check_type(value, tp, path: str):
    origin, args = typing.get_origin(tp), typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        (tp,) = [a for a in args if a is not type(None)]
        origin, args = typing.get_origin(tp), typing.get_args(tp)
    if tp is bool:
        ok = isinstance(value, bool)
    elif tp is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif tp is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif tp is str:
        ok = isinstance(value, str)
    elif origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        if len(args) == 2 and args[1] is Ellipsis:
            args = (args[0],) * len(value)
        elif len(args) != len(value):
            raise ConfigError(f"{path}: expected {len(args)} entries, got {len(value)}")
        return tuple(_check_type(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    else:
        raise ConfigError(f"{path}: unsupported field type {tp}")
    if not ok:
        raise ConfigError(f"{path}: expected {tp.__name__}, got {type(value).__name__}")
    return value


def _section(doc, path: str) -> dict:
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected an object")
    return doc


def _reject_unknown(doc: dict, allowed, path: str) -> None:
    for key in doc:
        if key not in allowed:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"{where}: unknown key")


def _build(cls, doc: dict, path: str, skip=(), **fixed):
    """Instantiate a dataclass from a JSON object, type-checking every given field."""
    hints = typing.get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls) if f.name not in skip]
    _reject_unknown(doc, names, path)
    kwargs = {k: _check_type(v, hints[k], f"{path}.{k}") for k, v in doc.items()}
    try:
        return cls(**kwargs, **fixed)
    except (ParameterError, ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _sampler_specs(entries, path: str, seed: int) -> tuple[SamplerSpec, ...]:
    if not isinstance(entries, list):
        raise ConfigError(f"{path}: expected a list")
    if not entries:
        raise ConfigError(f"{path}: method list is empty")
    specs = []
    for i, entry in enumerate(entries):
        where = f"{path}[{i}]"
        if isinstance(entry, str):
            entry = {"method": entry}
        entry = _section(entry, where)
        if "method" not in entry:
            raise ConfigError(f"{where}.method: missing required key")
        if entry["method"] not in METHODS:
            raise ConfigError(f"{where}.method: unknown sampler {entry['method']!r}")
        entry = {"seed": derive_seed(seed, f"sample.{entry['method']}"), **entry}
        specs.append(_build(SamplerSpec, entry, where))
    return tuple(specs)


def _grid_shape(path: Path, where: str) -> tuple[int, int]:
    try:
        return load_grid(path).shape
    except NightfuseError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def validate_config(document, base_dir: str | Path | None = None) -> ExperimentConfig:
    """Fully default and validate a parsed JSON config; errors name the key path."""
    doc = _section(document, "<root>")
    _reject_unknown(doc, {"output", "seed", "data", "network", "schedule", "train", "sample",
                          "eval", "bench", "precision", "deterministic"}, "")
    base = Path(base_dir) if base_dir is not None else Path.cwd()

    if "output" not in doc:
        raise ConfigError("output: missing required key")
    output = base / _check_type(doc["output"], str, "output")
    seed = _check_type(doc.get("seed", 0), int, "seed")
    if seed < 0:
        raise ConfigError("seed: must be non-negative")

    data_doc = dict(_section(doc.get("data"), "data"))
    _reject_unknown(data_doc, [f.name for f in dataclasses.fields(DataConfig)], "data")
    synth_doc = dict(_section(data_doc.pop("synth", None), "data.synth"))
    synth_doc.setdefault("seed", derive_seed(seed, "synth"))
    synth = _build(SynthParams, synth_doc, "data.synth")
    paths = {}
    for key in ("viirs", "dmsp"):
        value = data_doc.pop(key, None)
        if value is not None:
            p = base / _check_type(value, str, f"data.{key}")
            if not p.is_file():
                raise ConfigError(f"data.{key}: file {p} does not exist")
            value = p
        paths[key] = value
    if (paths["viirs"] is None) != (paths["dmsp"] is None):
        raise ConfigError("data: give both viirs and dmsp paths or neither")
    data = _build(DataConfig, data_doc, "data", skip=("viirs", "dmsp", "synth"), synth=synth, **paths)
    if data.patch < 1 or data.n_val < 1:
        raise ConfigError("data: patch and n_val must be positive")

    if paths["viirs"] is not None:
        shape = _grid_shape(paths["viirs"], "data.viirs")
        if _grid_shape(paths["dmsp"], "data.dmsp") != shape:
            raise ConfigError("data: viirs and dmsp grids differ in shape")
    else:
        side = synth.fine_size // 2
        shape = (side, side)
    n_patches = (shape[0] // data.patch) * (shape[1] // data.patch)
    if data.n_val >= n_patches:
        raise ConfigError(f"data.n_val: {data.n_val} validation patches but the scene holds only {n_patches}")

    network = _build(NetConfig, _section(doc.get("network"), "network"), "network", skip=("patch",),
                     patch=data.patch)

    sched_doc = dict(_section(doc.get("schedule"), "schedule"))
    kind = sched_doc.setdefault("kind", "linear")
    if kind not in _SCHEDULE_KEYS:
        raise ConfigError(f"schedule.kind: unknown schedule {kind!r}")
    _reject_unknown(sched_doc, _SCHEDULE_KEYS[kind], "schedule")
    sched_doc.setdefault("T", 1000)
    if not isinstance(sched_doc["T"], int) or isinstance(sched_doc["T"], bool):
        raise ConfigError("schedule.T: expected int")
    for key in _SCHEDULE_KEYS[kind] - {"kind", "T"}:
        if key in sched_doc:
            sched_doc[key] = _check_type(sched_doc[key], float, f"schedule.{key}")
    try:
        schedule = from_config(sched_doc).config()
    except ParameterError as exc:
        raise ConfigError(f"schedule: {exc}") from exc

    sample_doc = _section(doc.get("sample"), "sample")
    _reject_unknown(sample_doc, {"methods", "batch_size"}, "sample")
    methods = _sampler_specs(sample_doc.get("methods", list(DEFAULT_METHODS)), "sample.methods", seed)
    batch_size = _check_type(sample_doc.get("batch_size", 64), int, "sample.batch_size")
    if batch_size < 1:
        raise ConfigError("sample.batch_size: must be >= 1")
    for spec in methods:
        if spec.method == "ancestral" and spec.steps is not None and spec.steps != schedule["T"]:
            raise ConfigError(f"sample.methods: ancestral sampling runs all {schedule['T']} steps")

    train_doc = _section(doc.get("train"), "train")
    _reject_unknown(train_doc, {"noise", "velocity"}, "train")
    trains = {}
    for objective in ("noise", "velocity"):
        sub = dict(_section(train_doc.get(objective), f"train.{objective}"))
        sub.setdefault("seed", derive_seed(seed, f"train.{objective}"))
        trains[objective] = _build(TrainConfig, sub, f"train.{objective}", skip=("objective",),
                                   objective=objective)

    eval_doc = _section(doc.get("eval"), "eval")
    _reject_unknown(eval_doc, {"band"}, "eval")
    band = _check_type(eval_doc.get("band"), tuple[int, int] | None, "eval.band")
    if band is not None:
        n_bins = int(np.ceil(np.hypot(shape[0] // 2, shape[1] // 2))) + 1
        if not 0 <= band[0] < band[1] <= n_bins:
            raise ConfigError(f"eval.band: [{band[0]}, {band[1]}) outside [0, {n_bins})")

    bench_doc = dict(_section(doc.get("bench"), "bench"))
    _reject_unknown(bench_doc, {"precisions", "int8_method", "methods"}, "bench")
    bench_methods = None
    if bench_doc.get("methods") is not None:
        bench_methods = _sampler_specs(bench_doc.pop("methods"), "bench.methods", seed)
    bench_doc.pop("methods", None)
    bench = _build(BenchConfig, bench_doc, "bench", skip=("methods",), methods=bench_methods)
    for i, p in enumerate(bench.precisions):
        if p not in ("full32", "half16"):
            raise ConfigError(f"bench.precisions[{i}]: expected full32 or half16, got {p!r}")
    swept = bench_methods if bench_methods is not None else methods
    if bench.int8_method is not None and bench.int8_method not in {s.method for s in swept}:
        raise ConfigError(f"bench.int8_method: {bench.int8_method!r} is not among the benchmarked methods")
    for s in swept:
        if s.objective not in {m.objective for m in methods}:
            raise ConfigError(f"bench.methods: {s.method} needs a {s.objective} model that no sample method trains")

    precision = _check_type(doc.get("precision", "full32"), str, "precision")
    if precision not in ("full32", "half16"):
        raise ConfigError(f"precision: expected full32 or half16, got {precision!r}")
    deterministic = _check_type(doc.get("deterministic", False), bool, "deterministic")

    try:
        output.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"output: cannot create {output}: {exc}") from exc
    if not os.access(output, os.W_OK):
        raise ConfigError(f"output: {output} is not writable")

    return ExperimentConfig(output, seed, data, network, schedule, trains, methods, batch_size, band,
                            bench, precision, deterministic)


def load_config(path: str | Path, overrides: dict | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(document, dict):
        raise ConfigError(f"{path}: top level must be an object")
    document.update(overrides or {})
    return validate_config(document, path.parent)


# ---------------------------------------------------------------- stages

class Layout:
    """File names inside an artifact directory."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.viirs = self.root / "viirs.nlg"
        self.dmsp = self.root / "dmsp.nlg"
        self.cond_dn = self.root / "cond_dn.nlg"
        self.truth_dn = self.root / "truth_dn.nlg"
        self.pairs = self.root / "pairs"
        self.prepare = self.root / "prepare.json"
        self.fused = self.root / "fused"
        self.fuse_times = self.root / "fuse_times.json"
        self.metrics = self.root / "metrics.csv"
        self.spectra = self.root / "spectra"
        self.bench = self.root / "bench.csv"
        self.summary = self.root / "summary.csv"
        self.manifest = self.root / "run_manifest.json"
        self.failed = self.root / "FAILED"

    def checkpoint(self, objective: str) -> Path:
        return self.root / f"ckpt_{objective}.nfck"

    def train_log(self, objective: str) -> Path:
        return self.root / f"train_{objective}.csv"


def _require(stage: str, path: Path) -> Path:
    if not path.exists():
        raise StageError(f"{stage}: missing upstream artifact {path}")
    return path


def method_labels(specs) -> list[str]:
    """File-safe row labels; the step count is appended only where a method repeats or departs from its default."""
    counts = {}
    for s in specs:
        counts[s.method] = counts.get(s.method, 0) + 1
    labels = []
    for s in specs:
        plain = counts[s.method] == 1 and s.steps == DEFAULT_STEPS[s.method]
        label = s.method if plain else f"{s.method}_{s.steps}"
        labels.append(label + "_clip" if s.clip_x0 else label)
    if len(set(labels)) != len(labels):
        raise ConfigError("sample.methods: duplicate method entries")
    return labels


def _inputs(cfg: ExperimentConfig, lay: Layout, stage: str) -> tuple[Path, Path]:
    if cfg.data.viirs is not None:
        return cfg.data.viirs, cfg.data.dmsp
    return _require(stage, lay.viirs), _require(stage, lay.dmsp)


def stage_synth(cfg: ExperimentConfig) -> None:
    lay = Layout(cfg.output)
    if cfg.data.viirs is not None:
        log.info("synth: config names input rasters, nothing to generate")
        return
    viirs, dmsp = synth_pair(cfg.data.synth)
    save_grid(lay.viirs, viirs)
    save_grid(lay.dmsp, dmsp)


def stage_prepare(cfg: ExperimentConfig) -> None:
    lay = Layout(cfg.output)
    viirs_path, dmsp_path = _inputs(cfg, lay, "prepare")
    prep = preprocess(load_grid(viirs_path), load_grid(dmsp_path), cfg.data.floor,
                      cfg.data.r_hi_percentile, cfg.data.r_hi)
    train_pairs, val_pairs = make_split(prep, cfg.data.patch, cfg.data.n_val, derive_seed(cfg.seed, "split"))
    save_grid(lay.cond_dn, prep.cond_dn)
    save_grid(lay.truth_dn, prep.truth_dn)
    save_pairs(lay.pairs, train_pairs, val_pairs)
    lay.prepare.write_text(json.dumps({"r_hi": prep.r_hi, "n_train": len(train_pairs),
                                       "n_val": len(val_pairs)}, indent=2) + "\n")


def stage_train(cfg: ExperimentConfig) -> None:
    lay = Layout(cfg.output)
    _require("train", lay.pairs / "manifest.txt")
    split = load_pairs(lay.pairs)
    sched = from_config(cfg.schedule)
    for objective in cfg.objectives():
        tc = cfg.train[objective]
        ckpt = init(cfg.network, derive_seed(cfg.seed, f"init.{objective}"), cfg.schedule, objective)

        def progress(epoch, tr, va, objective=objective):
            log.info("train %s epoch %d train %.5f val %.5f", objective, epoch, tr, va)

        best, history = train(ckpt, split, sched, tc, lay.train_log(objective), progress)
        save_checkpoint(lay.checkpoint(objective), best)
        log.info("train %s: best epoch %d of %d", objective, history.best_epoch, len(history))


def _checkpoints(cfg: ExperimentConfig, stage: str, specs) -> dict:
    lay = Layout(cfg.output)
    needed = sorted({s.objective for s in specs})
    return {o: load_checkpoint(_require(stage, lay.checkpoint(o))) for o in needed}


def stage_fuse(cfg: ExperimentConfig) -> None:
    lay = Layout(cfg.output)
    ckpts = _checkpoints(cfg, "fuse", cfg.methods)
    cond = load_grid(_require("fuse", lay.cond_dn))
    lay.fused.mkdir(exist_ok=True)
    times = {}
    for spec, label in zip(cfg.methods, method_labels(cfg.methods)):
        ckpt = ckpts[spec.objective]
        start = time.perf_counter()
        out = fuse_full(cond, ckpt, spec, from_config(ckpt.schedule), cfg.precision,
                        cfg.data.patch, cfg.batch_size)
        times[label] = time.perf_counter() - start
        save_grid(lay.fused / f"{label}.nlg", out)
        log.info("fuse %s: %.2f s", label, times[label])
    if not cfg.deterministic:
        lay.fuse_times.write_text(json.dumps(times, indent=2) + "\n")
    elif lay.fuse_times.exists():
        lay.fuse_times.unlink()


def stage_eval(cfg: ExperimentConfig) -> None:
    lay = Layout(cfg.output)
    truth = load_grid(_require("eval", lay.truth_dn))
    cond = load_grid(_require("eval", lay.cond_dn))
    times = {}
    if not cfg.deterministic and lay.fuse_times.exists():
        times = json.loads(lay.fuse_times.read_text())
    rows = []
    for label in method_labels(cfg.methods):
        pred = load_grid(_require("eval", lay.fused / f"{label}.nlg"))
        rows.append(metrics_row(label, evaluate_pair(pred, truth), times.get(label)))
    rows.append(metrics_row(BASELINE, evaluate_pair(cond, truth), None))
    write_metrics_csv(lay.metrics, rows)


def _signed(g: Grid) -> Grid:
    return normalize_signed(g) if g.units == Units.DN else g


def stage_psd(cfg: ExperimentConfig) -> None:
    lay = Layout(cfg.output)
    lay.spectra.mkdir(exist_ok=True)
    truth = radial_psd(_signed(load_grid(_require("psd", lay.truth_dn))).values)
    grids = {"condition": lay.cond_dn}
    for label in method_labels(cfg.methods):
        grids[label] = lay.fused / f"{label}.nlg"
    write_spectrum_csv(lay.spectra / "truth.csv", truth)
    with open(lay.spectra / "distance.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["grid", "band_lo", "band_hi", "spectrum_distance"])
        for name, path in grids.items():
            spec = radial_psd(_signed(load_grid(_require("psd", path))).values)
            write_spectrum_csv(lay.spectra / f"{name}.csv", spec)
            band = cfg.band if cfg.band is not None else ((3 * spec.n_bins) // 4, spec.n_bins)
            w.writerow([name, band[0], band[1], fmt(spectrum_distance(spec, truth, band))])


def stage_bench(cfg: ExperimentConfig) -> None:
    lay = Layout(cfg.output)
    cond = load_grid(_require("bench", lay.cond_dn))
    truth = load_grid(_require("bench", lay.truth_dn))
    specs = cfg.bench.methods if cfg.bench.methods is not None else cfg.methods
    ckpts = _checkpoints(cfg, "bench", specs)
    records = precision_report(ckpts, cond, specs, truth, cfg.bench.precisions, cfg.bench.int8_method,
                               cfg.batch_size)
    write_bench_csv(lay.bench, records)


def stage_report(cfg: ExperimentConfig) -> None:
    """Join metrics, spectral distances and full32 bench counts into summary.csv."""
    lay = Layout(cfg.output)
    with open(_require("report", lay.metrics), newline="") as fh:
        metrics = list(csv.DictReader(fh))
    distances = {}
    if (lay.spectra / "distance.csv").exists():
        with open(lay.spectra / "distance.csv", newline="") as fh:
            distances = {r["grid"]: r["spectrum_distance"] for r in csv.DictReader(fh)}
    evals = {}
    if lay.bench.exists():
        with open(lay.bench, newline="") as fh:
            for r in csv.DictReader(fh):
                if r["precision"] == "full32":
                    evals[r["method"]] = r["net_evals"]
    columns = ["method", "ssim", "psnr_db", "mae", "rmse", "wall_seconds", "spectrum_distance", "net_evals"]
    with open(lay.summary, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in metrics:
            key = "condition" if r["method"] == BASELINE else r["method"]
            w.writerow([r["method"], r["ssim"], r["psnr_db"], r["mae"], r["rmse"], r["wall_seconds"],
                        distances.get(key, "-"), evals.get(r["method"], "-")])


STAGE_FUNCS = {
    "synth": stage_synth,
    "prepare": stage_prepare,
    "train": stage_train,
    "fuse": stage_fuse,
    "eval": stage_eval,
    "psd": stage_psd,
    "bench": stage_bench,
    "report": stage_report,
}


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(cfg: ExperimentConfig, stages) -> Path:
    """Config, derived seeds, input hashes and code version; contains no timestamps."""
    lay = Layout(cfg.output)
    inputs = {}
    for name, path in (("viirs", cfg.data.viirs or lay.viirs), ("dmsp", cfg.data.dmsp or lay.dmsp)):
        if Path(path).exists():
            inputs[name] = {"path": str(path), "sha256": _sha256(Path(path))}
    labels = method_labels(cfg.methods)
    manifest = {
        "version": __version__,
        "torch": torch.__version__,
        "config": cfg.to_dict(),
        "seeds": {
            "global": cfg.seed,
            "synth": cfg.data.synth.seed,
            "split": derive_seed(cfg.seed, "split"),
            "init": {o: derive_seed(cfg.seed, f"init.{o}") for o in cfg.objectives()},
            "train": {o: cfg.train[o].seed for o in cfg.objectives()},
            "sample": {label: s.seed for label, s in zip(labels, cfg.methods)},
        },
        "inputs": inputs,
        "stages": list(stages),
    }
    lay.manifest.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return lay.manifest


def run_stage(cfg: ExperimentConfig, stage: str) -> None:
    """Run one stage; on failure leave a FAILED marker naming it and re-raise."""
    lay = Layout(cfg.output)
    try:
        STAGE_FUNCS[stage](cfg)
    except Exception as exc:
        lay.failed.write_text(f"stage: {stage}\nerror: {type(exc).__name__}: {exc}\n")
        if isinstance(exc, NightfuseError) and not str(exc).startswith(f"{stage}:"):
            exc.args = (f"{stage}: {exc}",) + exc.args[1:]
        raise


def run_experiment(cfg: ExperimentConfig) -> Path:
    """synth -> prepare -> train -> fuse -> eval -> psd -> bench -> report."""
    lay = Layout(cfg.output)
    if lay.failed.exists():
        lay.failed.unlink()
    done = []
    for stage in STAGES:
        run_stage(cfg, stage)
        done.append(stage)
        log.info("stage %s done", stage)
    write_manifest(cfg, done)
    return cfg.output


# ---------------------------------------------------------------- entry point

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nightfuse", description="Conditional diffusion and flow-matching raster fusion.")
    parser.add_argument("--version", action="version", version=f"nightfuse {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in (*STAGES, "run"):
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON experiment config")
        p.add_argument("--out", type=Path, help="artifact directory (overrides config output)")
        p.add_argument("--seed", type=int, help="global seed (overrides config seed)")
        p.add_argument("--precision", choices=["full32", "half16"], help="inference precision for fuse")
        p.add_argument("--deterministic", action="store_true",
                       help="deterministic kernels; wall times written as '-'")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "eval":
            p.add_argument("--pred", type=Path, help="score one grid against --truth instead of the run")
            p.add_argument("--truth", type=Path)
        if name == "psd":
            p.add_argument("--grid", type=Path, help="spectrum of one grid instead of the run")
    return parser


def _standalone_eval(args) -> None:
    if args.pred is None or args.truth is None:
        raise ConfigError("eval: --pred and --truth must be given together")
    row = metrics_row(args.pred.stem, evaluate_pair(load_grid(args.pred), load_grid(args.truth)), None)
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(args.out, [row])
    else:
        w = csv.DictWriter(sys.stdout, fieldnames=list(row), lineterminator="\n")
        w.writeheader()
        w.writerow(row)


def _standalone_psd(args) -> None:
    spec = radial_psd(_signed(load_grid(args.grid)).values)
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        write_spectrum_csv(args.out, spec)
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["bin", "wavenumber", "mean_power", "count"])
        for i, (k, p, c) in enumerate(zip(spec.wavenumber, spec.mean_power, spec.count)):
            w.writerow([i, int(k), fmt(p), int(c)])


def _overrides(args) -> dict:
    out = {}
    if args.out is not None:
        out["output"] = str(args.out.resolve())
    if args.seed is not None:
        out["seed"] = args.seed
    if args.precision is not None:
        out["precision"] = args.precision
    if args.deterministic:
        out["deterministic"] = True
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "eval" and (args.pred is not None or args.truth is not None):
            _standalone_eval(args)
            return 0
        if args.command == "psd" and args.grid is not None:
            _standalone_psd(args)
            return 0
        if args.config is None:
            raise ConfigError(f"{args.command}: --config is required")
        cfg = load_config(args.config, _overrides(args))
        if cfg.deterministic:
            torch.use_deterministic_algorithms(True)
        if args.command == "run":
            run_experiment(cfg)
        else:
            run_stage(cfg, args.command)
            stages = [args.command]
            if Layout(cfg.output).manifest.exists():
                prior = json.loads(Layout(cfg.output).manifest.read_text()).get("stages", [])
                stages = prior + [s for s in stages if s not in prior]
            write_manifest(cfg, stages)
    except NightfuseError as exc:
        print(f"nightfuse: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"nightfuse: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
