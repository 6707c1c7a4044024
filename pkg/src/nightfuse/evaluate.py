"""Pixel metrics, SSIM and the azimuthally averaged power spectrum."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from .errors import EvaluationError, ParameterError, ShapeError
from .raster import Grid, to_unit


@dataclass(frozen=True)
class MetricsReport:
    ssim: float
    psnr_db: float
    mae: float
    mse: float
    rmse: float


@dataclass(frozen=True, eq=False)
class RadialSpectrum:
    wavenumber: np.ndarray
    mean_power: np.ndarray
    count: np.ndarray

    @property
    def n_bins(self) -> int:
        return len(self.wavenumber)

    def total_power(self) -> float:
        return float((self.mean_power * self.count).sum())

    def energy(self) -> np.ndarray:
        """Per-annulus summed power (zonal energy spectrum)."""
        return self.mean_power * self.count


def _values(g) -> np.ndarray:
    if isinstance(g, Grid):
        return g.values.astype(np.float64)
    return np.asarray(g, dtype=np.float64)


def pixel_metrics(pred, truth) -> tuple[float, float, float]:
    """(mae, mse, rmse) over pixels valid in both grids."""
    p, t = _values(pred), _values(truth)
    if p.shape != t.shape:
        raise ShapeError(f"shape mismatch {p.shape} vs {t.shape}")
    valid = ~(np.isnan(p) | np.isnan(t))
    if not valid.any():
        raise EvaluationError("no pixel is valid in both grids")
    diff = p[valid] - t[valid]
    mae = float(np.abs(diff).mean())
    mse = float((diff ** 2).mean())
    return mae, mse, math.sqrt(mse)


def psnr(mse: float, data_range: float = 1.0) -> float:
    if mse < 0:
        raise ParameterError("mse must be non-negative")
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(data_range ** 2 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    k = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(k ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def ssim(pred, truth, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Mean SSIM over every fully contained Gaussian window position."""
    x, y = _values(pred), _values(truth)
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {y.shape}")
    if min(x.shape) < window:
        raise ShapeError(f"grid {x.shape} smaller than the {window}x{window} window")
    if np.isnan(x).any() or np.isnan(y).any():
        raise EvaluationError("SSIM needs grids without missing values")
    g = gaussian_window(window, sigma)
    half = window // 2

    def blur(a):
        a = correlate1d(correlate1d(a, g, axis=0, mode="constant"), g, axis=1, mode="constant")
        return a[half:a.shape[0] - half, half:a.shape[1] - half]

    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mx, my = blur(x), blur(y)
    vx = blur(x * x) - mx * mx
    vy = blur(y * y) - my * my
    cxy = blur(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float((num / den).mean())


def evaluate_pair(pred: Grid, truth: Grid) -> MetricsReport:
    """Table-style metrics on unit-normalized grids (dn grids are divided by 63)."""
    p, t = to_unit(pred), to_unit(truth)
    mae, mse, rmse = pixel_metrics(p, t)
    return MetricsReport(ssim(p, t), psnr(mse), mae, mse, rmse)


def radial_psd(g) -> RadialSpectrum:
    """Power |F|^2 / (w h)^2 binned by rounded radial wavenumber (cycles per image)."""
    v = _values(g)
    if v.ndim != 2 or min(v.shape) < 2:
        raise ShapeError("radial_psd needs a 2-D grid of at least 2x2")
    if np.isnan(v).any():
        raise EvaluationError("radial_psd needs grids without missing values")
    h, w = v.shape
    power = np.abs(np.fft.fft2(v)) ** 2 / float(w * h) ** 2
    ky = np.fft.fftfreq(h) * h
    kx = np.fft.fftfreq(w) * w
    r = np.rint(np.hypot(ky[:, None], kx[None, :])).astype(np.int64).ravel()
    count = np.bincount(r)
    total = np.bincount(r, weights=power.ravel())
    keep = count > 0
    mean = np.zeros_like(total)
    mean[keep] = total[keep] / count[keep]
    return RadialSpectrum(np.arange(len(count)), mean, count)


def top_quartile_band(spec: RadialSpectrum) -> tuple[int, int]:
    return (3 * spec.n_bins) // 4, spec.n_bins


def spectrum_distance(a: RadialSpectrum, b: RadialSpectrum, band: tuple[int, int] | None = None) -> float:
    """Mean |log10(a/b)| over the half-open bin range `band` (default: top quartile)."""
    if a.n_bins != b.n_bins:
        raise ParameterError("spectra use different binning")
    lo, hi = band if band is not None else top_quartile_band(a)
    if not 0 <= lo < hi <= a.n_bins:
        raise ParameterError(f"band [{lo}, {hi}) outside available bins [0, {a.n_bins})")
    pa, pb = a.mean_power[lo:hi], b.mean_power[lo:hi]
    occupied = (a.count[lo:hi] > 0) & (b.count[lo:hi] > 0)
    pa, pb = pa[occupied], pb[occupied]
    if not len(pa) or (pa <= 0).any() or (pb <= 0).any():
        raise EvaluationError("zero power inside the band; exclude empty bins from the band")
    return float(np.abs(np.log10(pa / pb)).mean())


def fmt(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(float(v))


METRIC_COLUMNS = ["method", "ssim", "psnr_db", "mae", "mse", "rmse", "wall_seconds"]


def metrics_row(method: str, report: MetricsReport, wall_seconds: float | None, precision: str | None = None):
    row = {"method": method}
    if precision is not None:
        row["precision"] = precision
    row.update(
        ssim=fmt(report.ssim), psnr_db=fmt(report.psnr_db), mae=fmt(report.mae),
        mse=fmt(report.mse), rmse=fmt(report.rmse),
        wall_seconds="-" if wall_seconds is None else fmt(wall_seconds),
    )
    return row


def write_metrics_csv(path: str | Path, rows: list[dict]) -> None:
    columns = list(METRIC_COLUMNS)
    if rows and "precision" in rows[0]:
        columns.insert(1, "precision")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def write_spectrum_csv(path: str | Path, spec: RadialSpectrum, energy: bool = False) -> None:
    power = spec.energy() if energy else spec.mean_power
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin", "wavenumber", "energy" if energy else "mean_power", "count"])
        for i, (k, p, c) in enumerate(zip(spec.wavenumber, power, spec.count)):
            w.writerow([i, int(k), fmt(p), int(c)])


def read_spectrum_csv(path: str | Path) -> RadialSpectrum:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise EvaluationError(f"{path}: empty spectrum file")
    count = np.array([int(r["count"]) for r in rows])
    if "mean_power" in rows[0]:
        mean = np.array([float(r["mean_power"]) for r in rows])
    else:
        energy = np.array([float(r["energy"]) for r in rows])
        mean = np.divide(energy, count, out=np.zeros_like(energy), where=count > 0)
    return RadialSpectrum(np.array([int(r["wavenumber"]) for r in rows]), mean, count)
