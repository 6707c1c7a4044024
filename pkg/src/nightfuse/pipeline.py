"""Preprocessing chain shared by the CLI stages and the end-to-end run."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import extract_pairs, split
from .raster import Grid, joint_background_filter, linear_scale_to_dn, normalize_signed


@dataclass(frozen=True, eq=False)
class Prepared:
    cond_dn: Grid
    truth_dn: Grid
    cond: Grid
    truth: Grid
    r_hi: float


def preprocess(viirs: Grid, dmsp: Grid, floor: float = 0.5, r_hi_percentile: float = 99.5,
               r_hi: float | None = None) -> Prepared:
    """Background filter, radiometric scaling to DN, then [-1, 1] normalization."""
    viirs_f, dmsp_f = joint_background_filter(viirs, dmsp, floor)
    if r_hi is None:
        r_hi = float(np.nanpercentile(viirs_f.values, r_hi_percentile))
        if r_hi <= 0:
            r_hi = float(np.nanmax(viirs_f.values)) or 1.0
    cond_dn = linear_scale_to_dn(viirs_f, 0.0, r_hi)
    return Prepared(cond_dn, dmsp_f, normalize_signed(cond_dn), normalize_signed(dmsp_f), r_hi)


def make_split(prep: Prepared, patch: int = 32, n_val: int = 50, seed: int = 0):
    pairs = extract_pairs(prep.cond, prep.truth, patch)
    return split(pairs, n_val, seed)
