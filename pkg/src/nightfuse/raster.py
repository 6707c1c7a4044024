"""Single-band raster grids, the NLG1 file format and sensor preprocessing.

A :class:`Grid` holds row-major float32 samples (row 0 = top) with NaN as the
missing-data marker and a units tag that fixes the admissible value range.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError, ShapeError, UnitsError

MAGIC = b"NLG1"
HEADER = struct.Struct("<4sIII")
DN_MAX = 63.0


class Units(IntEnum):
    DN = 0
    RADIANCE = 1
    UNIT = 2
    SIGNED = 3

    @classmethod
    def parse(cls, value: "Units | str | int") -> "Units":
        if isinstance(value, Units):
            return value
        if isinstance(value, str):
            try:
                return cls[value.upper()]
            except KeyError:
                raise ParameterError(f"unknown units {value!r}") from None
        return cls(value)


_RANGES = {
    Units.DN: (0.0, DN_MAX),
    Units.RADIANCE: (0.0, np.inf),
    Units.UNIT: (0.0, 1.0),
    Units.SIGNED: (-1.0, 1.0),
}


@dataclass(frozen=True, eq=False)
class Grid:
    values: np.ndarray
    units: Units

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float32, copy=True)
        if v.ndim != 2:
            raise ShapeError(f"grid values must be 2-D, got shape {v.shape}")
        if v.shape[0] < 1 or v.shape[1] < 1:
            raise ShapeError("grid must be at least 1x1")
        units = Units.parse(self.units)
        lo, hi = _RANGES[units]
        finite = v[~np.isnan(v)]
        if finite.size and (finite.min() < lo or finite.max() > hi):
            raise UnitsError(
                f"values [{finite.min()}, {finite.max()}] outside {units.name.lower()} range [{lo}, {hi}]"
            )
        v.flags.writeable = False
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "units", units)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def identical(self, other: "Grid") -> bool:
        """Bitwise equality of samples (NaN payloads included) and metadata."""
        return (
            self.units == other.units
            and self.shape == other.shape
            and self.values.tobytes() == other.values.tobytes()
        )

    def __repr__(self) -> str:
        return f"Grid({self.width}x{self.height}, units={self.units.name.lower()})"


def read_grid(data: bytes) -> Grid:
    if len(data) < HEADER.size + 1:
        raise FormatError("truncated header")
    magic, width, height, reserved = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if width == 0 or height == 0:
        raise FormatError("width and height must be nonzero")
    if reserved != 0:
        raise FormatError("reserved header field must be zero")
    tag = data[HEADER.size]
    if tag not in Units._value2member_map_:
        raise FormatError(f"unknown units tag {tag}")
    payload = data[HEADER.size + 1:]
    expected = 4 * width * height
    if len(payload) != expected:
        raise FormatError(f"payload has {len(payload)} bytes, header implies {expected}")
    values = np.frombuffer(payload, dtype="<f4").reshape(height, width)
    return Grid(values, Units(tag))


def write_grid(g: Grid) -> bytes:
    header = HEADER.pack(MAGIC, g.width, g.height, 0) + bytes([int(g.units)])
    return header + g.values.astype("<f4").tobytes()


def load_grid(path: str | Path) -> Grid:
    return read_grid(Path(path).read_bytes())


def save_grid(path: str | Path, g: Grid) -> None:
    Path(path).write_bytes(write_grid(g))


def read_csv_grid(path: str | Path, units: Units | str) -> Grid:
    """Comma-separated decimals, one line per raster row; empty or 'nan' cells are missing."""
    rows = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rows.append([float(c) if c.strip() else np.nan for c in line.split(",")])
    if not rows or len({len(r) for r in rows}) != 1:
        raise FormatError("CSV grid must be a non-empty rectangle")
    return Grid(np.array(rows, dtype=np.float32), Units.parse(units))


def block_average(g: Grid, k: int) -> Grid:
    """Mean of the non-missing samples in each k x k block; all-missing blocks stay missing."""
    if k < 1:
        raise ParameterError("block factor must be >= 1")
    if g.width % k or g.height % k:
        raise ShapeError(f"{g.width}x{g.height} not divisible by {k}")
    if k == 1:
        return g
    blocks = g.values.astype(np.float64).reshape(g.height // k, k, g.width // k, k)
    valid = ~np.isnan(blocks)
    count = valid.sum(axis=(1, 3))
    total = np.where(valid, blocks, 0.0).sum(axis=(1, 3))
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(count > 0, total / np.maximum(count, 1), np.nan)
    return Grid(mean.astype(np.float32), g.units)


def linear_scale_to_dn(g: Grid, r_lo: float = 0.0, r_hi: float | None = None) -> Grid:
    """Map radiance linearly onto 0-63 DN; r_hi defaults to the scene's 99.5th percentile."""
    if g.units != Units.RADIANCE:
        raise UnitsError("linear_scale_to_dn expects a radiance grid")
    if r_hi is None:
        r_hi = float(np.nanpercentile(g.values, 99.5))
    if not r_hi > r_lo:
        raise ParameterError(f"r_hi ({r_hi}) must exceed r_lo ({r_lo})")
    v = g.values.astype(np.float64)
    dn = np.clip(DN_MAX * (v - r_lo) / (r_hi - r_lo), 0.0, DN_MAX)
    return Grid(dn.astype(np.float32), Units.DN)


def joint_background_filter(viirs: Grid, dmsp: Grid, floor: float = 0.5) -> tuple[Grid, Grid]:
    """Zero both sensors wherever VIIRS is below `floor` and DMSP is dark."""
    if viirs.shape != dmsp.shape:
        raise ShapeError(f"shape mismatch {viirs.shape} vs {dmsp.shape}")
    mask = (viirs.values < floor) & (dmsp.values == 0)
    v = np.where(mask, np.float32(0), viirs.values)
    d = np.where(mask, np.float32(0), dmsp.values)
    return Grid(v, viirs.units), Grid(d, dmsp.units)


def normalize_signed(g: Grid) -> Grid:
    if g.units != Units.DN:
        raise UnitsError("normalize_signed expects a dn grid")
    v = 2.0 * (g.values.astype(np.float64) / DN_MAX) - 1.0
    return Grid(np.clip(v, -1.0, 1.0).astype(np.float32), Units.SIGNED)


def denormalize_dn(g: Grid | np.ndarray) -> Grid:
    """Inverse of :func:`normalize_signed`; also accepts raw sampler output (clamped)."""
    if isinstance(g, Grid):
        if g.units != Units.SIGNED:
            raise UnitsError("denormalize_dn expects a signed grid")
        v = g.values
    else:
        v = np.asarray(g)
    dn = np.clip(DN_MAX * (v.astype(np.float64) + 1.0) / 2.0, 0.0, DN_MAX)
    return Grid(dn.astype(np.float32), Units.DN)


def to_unit(g: Grid) -> Grid:
    """Express a dn or signed grid on [0, 1] for metric computation."""
    if g.units == Units.UNIT:
        return g
    if g.units == Units.DN:
        v = g.values.astype(np.float64) / DN_MAX
    elif g.units == Units.SIGNED:
        v = (g.values.astype(np.float64) + 1.0) / 2.0
    else:
        raise UnitsError("radiance grids have no canonical unit normalization")
    return Grid(np.clip(v, 0.0, 1.0).astype(np.float32), Units.UNIT)
