"""Patch tiling, train/validation splitting and a synthetic VIIRS/DMSP scene pair.

The synthetic pair stands in for real co-registered rasters: a fine luminance
field is block-averaged to give the VIIRS role, and a blurred, saturated, 6-bit
quantized copy of it gives the DMSP role.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import FormatError, ParameterError, ShapeError
from .raster import DN_MAX, Grid, Units, block_average, load_grid, save_grid


@dataclass(frozen=True, eq=False)
class PatchPair:
    cond: np.ndarray
    target: np.ndarray
    row0: int
    col0: int


@dataclass(frozen=True)
class SynthParams:
    # defaults: dense point-like towns that stay sharp in VIIRS but bloom and saturate in DMSP
    fine_size: int = 1152
    n_cities: int = 20
    n_towns: int = 2000
    city_sigma_px: float = 20.0
    city_peak: float = 80.0
    town_peak: float = 96.0
    saturation_radiance: float = 8.0
    dmsp_blur_sigma_px: float = 1.5
    sensor_noise_sd: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.fine_size % 2 or self.fine_size % 64:
            raise ParameterError("fine_size must be divisible by 2 and by 64")
        if self.n_cities < 0 or self.n_towns < 0:
            raise ParameterError("counts must be non-negative")
        if min(self.city_sigma_px, self.dmsp_blur_sigma_px, self.saturation_radiance) <= 0:
            raise ParameterError("sigmas and saturation radiance must be positive")
        if self.sensor_noise_sd < 0 or self.city_peak < 0 or self.town_peak < 0:
            raise ParameterError("amplitudes must be non-negative")


def extract_pairs(cond: Grid, target: Grid, patch: int = 32) -> list[PatchPair]:
    """Non-overlapping tiles in raster order; partial edge tiles are dropped."""
    if cond.shape != target.shape:
        raise ShapeError(f"shape mismatch {cond.shape} vs {target.shape}")
    h, w = cond.shape
    if h < patch or w < patch:
        raise ShapeError(f"grid {w}x{h} smaller than patch {patch}")
    c, t = cond.values, target.values
    if np.isnan(c).any() or np.isnan(t).any():
        raise ShapeError("patch sources must not contain missing values")
    pairs = []
    for r in range(0, (h // patch) * patch, patch):
        for col in range(0, (w // patch) * patch, patch):
            pairs.append(PatchPair(
                c[r:r + patch, col:col + patch].copy(),
                t[r:r + patch, col:col + patch].copy(),
                r, col,
            ))
    return pairs


def split(pairs, n_val: int = 50, seed: int = 0):
    """Seeded shuffle; the last `n_val` pairs of the shuffled order are validation."""
    pairs = list(pairs)
    if not 0 <= n_val <= len(pairs):
        raise ParameterError(f"n_val={n_val} outside [0, {len(pairs)}]")
    order = np.random.default_rng(seed).permutation(len(pairs))
    shuffled = [pairs[i] for i in order]
    cut = len(pairs) - n_val
    return shuffled[:cut], shuffled[cut:]


def stack(pairs) -> tuple[np.ndarray, np.ndarray]:
    """(cond, target) arrays of shape (n, 1, p, p)."""
    cond = np.stack([p.cond for p in pairs])[:, None].astype(np.float32)
    target = np.stack([p.target for p in pairs])[:, None].astype(np.float32)
    return cond, target


def quantize6(v: np.ndarray) -> np.ndarray:
    q = np.rint(np.clip(v, 0.0, DN_MAX))
    q[v < 1.0] = 0.0
    return q


def synth_luminance(p: SynthParams) -> np.ndarray:
    rng = np.random.default_rng(p.seed)
    n = p.fine_size
    field = np.zeros((n, n), dtype=np.float64)
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    for _ in range(p.n_cities):
        cy, cx = rng.uniform(0.1 * n, 0.9 * n, size=2)
        sigma = p.city_sigma_px * rng.uniform(0.5, 1.5)
        peak = p.city_peak * rng.uniform(0.3, 1.0)
        field += peak * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
    if p.n_towns:
        rows = rng.integers(0, n, size=p.n_towns)
        cols = rng.integers(0, n, size=p.n_towns)
        peaks = p.town_peak * rng.uniform(0.25, 1.0, size=p.n_towns)
        np.add.at(field, (rows, cols), peaks)
    if p.sensor_noise_sd > 0:
        field += np.abs(rng.normal(0.0, p.sensor_noise_sd, size=field.shape))
    return field


def degrade_to_dmsp(viirs: np.ndarray, p: SynthParams) -> np.ndarray:
    """Blur, saturate and 6-bit quantize a radiance field into DMSP-style DN."""
    scaled = viirs / p.saturation_radiance
    blurred = gaussian_filter(scaled, p.dmsp_blur_sigma_px, mode="constant")
    return quantize6(np.clip(DN_MAX * blurred, 0.0, DN_MAX))


def synth_pair(p: SynthParams | None = None) -> tuple[Grid, Grid]:
    p = p or SynthParams()
    fine = Grid(synth_luminance(p).astype(np.float32), Units.RADIANCE)
    viirs = block_average(fine, 2)
    dmsp = degrade_to_dmsp(viirs.values.astype(np.float64), p)
    return viirs, Grid(dmsp.astype(np.float32), Units.DN)


def save_pairs(directory: str | Path, train, val) -> Path:
    """Write `pair_{i}_{cond|target}.nlg` files plus `manifest.txt`."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = ["index,row0,col0,split"]
    for i, (pair, role) in enumerate([(p, "train") for p in train] + [(p, "val") for p in val]):
        save_grid(directory / f"pair_{i}_cond.nlg", Grid(pair.cond, Units.SIGNED))
        save_grid(directory / f"pair_{i}_target.nlg", Grid(pair.target, Units.SIGNED))
        lines.append(f"{i},{pair.row0},{pair.col0},{role}")
    manifest = directory / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_pairs(directory: str | Path):
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.exists():
        raise FormatError(f"missing {manifest}")
    train, val = [], []
    for line in manifest.read_text().splitlines()[1:]:
        i, r, c, role = line.split(",")
        pair = PatchPair(
            load_grid(directory / f"pair_{i}_cond.nlg").values.copy(),
            load_grid(directory / f"pair_{i}_target.nlg").values.copy(),
            int(r), int(c),
        )
        (train if role == "train" else val).append(pair)
    return train, val


def synth_params_dict(p: SynthParams) -> dict:
    return asdict(p)
