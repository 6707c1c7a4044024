"""Timing and precision sweeps over samplers: wall time, exact network-call counts, SSIM deltas."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

from .errors import NumericError, ParameterError
from .evaluate import fmt, ssim
from .network import Checkpoint, PrecisionMode, get_module, quantize_int8
from .raster import Grid, to_unit
from .sample import Predictor, SamplerSpec, fuse_full
from .schedule import from_config

BENCH_COLUMNS = ["method", "precision", "steps", "net_evals", "wall_seconds", "ssim_delta", "emulated"]


@dataclass(frozen=True)
class BenchRecord:
    method: str
    precision: PrecisionMode
    steps: int
    net_evals: int
    wall_seconds: float
    ssim_delta_vs_full32: float
    emulated: bool = False
    ssim_vs_truth: float | None = None


def count_evals(spec: SamplerSpec, T: int) -> int:
    """Network evaluations per patch for one run of the sampler."""
    steps = spec.steps_for(T)
    ledger = {
        "ddim": steps,
        "ancestral": T,
        "lcm": steps,
        "edm_heun": 2 * steps - 1,
        "pf_euler": steps,
        "pf_heun": 2 * steps,
        "fm_euler": steps,
    }
    if spec.method not in ledger:
        raise ParameterError(f"unknown method {spec.method!r}")
    return ledger[spec.method]


def half_accelerated(ckpt: Checkpoint) -> bool:
    """True only when 16-bit modules run on an accelerator with native half arithmetic."""
    net = get_module(ckpt, PrecisionMode.HALF16)
    return next(net.parameters()).device.type == "cuda"


def _model_for(ckpt: Checkpoint, precision: PrecisionMode) -> Checkpoint:
    return quantize_int8(ckpt) if precision == PrecisionMode.WEIGHTS_INT8 else ckpt


def _tile_count(cond: Grid, patch: int) -> int:
    return (cond.height // patch) * (cond.width // patch)


def time_method(ckpt: Checkpoint, cond: Grid, spec: SamplerSpec, precision=PrecisionMode.FULL32,
                truth: Grid | None = None, reference: Grid | None = None,
                batch_size: int = 64) -> tuple[BenchRecord, Grid]:
    """Time one full-scene fusion after an untimed single-tile warmup.

    ``reference`` is the full32 output for the same spec; when omitted for a
    reduced-precision run it is computed here. The SSIM delta is taken against
    ``truth`` when given, otherwise against the reference itself.
    """
    precision = PrecisionMode(precision)
    sched = from_config(ckpt.schedule)
    patch = ckpt.config.patch
    model = _model_for(ckpt, precision)
    warm = Grid(cond.values[:patch, :patch], cond.units)
    fuse_full(warm, model, spec, sched, precision, patch, batch_size)

    pred = Predictor(model, precision)
    start = time.perf_counter()
    out = fuse_full(cond, pred, spec, sched, precision, patch, batch_size)
    wall = max(time.perf_counter() - start, 1e-9)

    expected = count_evals(spec, sched.T) * _tile_count(cond, patch)
    if pred.evals != expected:
        raise NumericError(f"{spec.method}: measured {pred.evals} network evaluations, ledger says {expected}")

    if precision == PrecisionMode.FULL32:
        delta = 0.0
        score = ssim(to_unit(out), to_unit(truth)) if truth is not None else None
    else:
        if reference is None:
            reference = fuse_full(cond, ckpt, spec, sched, PrecisionMode.FULL32, patch, batch_size)
        base = to_unit(truth if truth is not None else reference)
        score = ssim(to_unit(out), base)
        delta = score - ssim(to_unit(reference), base)
    emulated = precision == PrecisionMode.HALF16 and not half_accelerated(ckpt)
    steps = spec.steps_for(sched.T)
    return BenchRecord(spec.method, precision, steps, expected, wall, delta, emulated, score), out


def precision_report(ckpts, cond: Grid, methods, truth: Grid | None = None,
                     precisions=(PrecisionMode.FULL32, PrecisionMode.HALF16),
                     int8_method: str | None = None, batch_size: int = 64) -> list[BenchRecord]:
    """Sweep methods x precisions, plus int8 weights for one designated method.

    ``ckpts`` maps objective ("noise"/"velocity") to checkpoint, or is a single
    checkpoint used for every method.
    """
    specs = [m if isinstance(m, SamplerSpec) else SamplerSpec(m) for m in methods]
    if not specs:
        raise ParameterError("method list is empty")
    precisions = [PrecisionMode(p) for p in precisions]
    if int8_method is None:
        names = [s.method for s in specs]
        int8_method = "fm_euler" if "fm_euler" in names else names[0]
    records = []
    for spec in specs:
        ckpt = ckpts[spec.objective] if isinstance(ckpts, dict) else ckpts
        runs = list(precisions)
        if spec.method == int8_method:
            runs.append(PrecisionMode.WEIGHTS_INT8)
        full_rec, full_out = time_method(ckpt, cond, spec, PrecisionMode.FULL32, truth, batch_size=batch_size)
        for precision in runs:
            if precision == PrecisionMode.FULL32:
                records.append(full_rec)
            else:
                rec, _ = time_method(ckpt, cond, spec, precision, truth, full_out, batch_size)
                records.append(rec)
    return records


def write_bench_csv(path: str | Path, records: list[BenchRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BENCH_COLUMNS)
        for r in records:
            w.writerow([r.method, r.precision.value, r.steps, r.net_evals, fmt(r.wall_seconds),
                        fmt(r.ssim_delta_vs_full32), str(r.emulated).lower()])
