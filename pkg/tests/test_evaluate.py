import math

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from nightfuse.errors import EvaluationError, ParameterError, ShapeError
from nightfuse.evaluate import (
    METRIC_COLUMNS,
    MetricsReport,
    evaluate_pair,
    metrics_row,
    pixel_metrics,
    psnr,
    radial_psd,
    read_spectrum_csv,
    spectrum_distance,
    ssim,
    top_quartile_band,
    write_metrics_csv,
    write_spectrum_csv,
)
from nightfuse.raster import Grid, Units

# published rows: method, ssim, psnr, mae, mse, rmse
TABLE = [
    ("DDIM", 0.6158, 21.9123, 0.0438, 0.0064, 0.0802),
    ("LCM", 0.6491, 20.6988, 0.0506, 0.0085, 0.0923),
    ("EDM", 0.5141, 20.2804, 0.0539, 0.0094, 0.0968),
    ("Euler Flow", 0.2247, 19.7997, 0.0757, 0.0105, 0.1023),
    ("Heun Flow", 0.2233, 20.3246, 0.0681, 0.0093, 0.0963),
    ("Vanilla Flow", 0.3637, 20.6182, 0.0581, 0.0087, 0.0931),
    ("VIIRS", 0.4137, 12.5146, 0.1110, 0.05603, 0.2367),
]


@pytest.mark.parametrize("row", TABLE, ids=[r[0] for r in TABLE])
def test_published_rows_consistent(row):
    _, _, p, _, mse, rmse = row
    assert abs(psnr(mse) - p) < 0.05
    assert abs(math.sqrt(mse) - rmse) < 3e-4


def brute_ssim(x, y, size=11, sigma=1.5, k1=0.01, k2=0.03):
    k = np.arange(size) - (size - 1) / 2
    g = np.exp(-k ** 2 / (2 * sigma ** 2))
    w = np.outer(g, g)
    w /= w.sum()
    c1, c2 = k1 ** 2, k2 ** 2
    vals = []
    for i in range(x.shape[0] - size + 1):
        for j in range(x.shape[1] - size + 1):
            a, b = x[i:i + size, j:j + size], y[i:i + size, j:j + size]
            ma, mb = (w * a).sum(), (w * b).sum()
            va = (w * (a - ma) ** 2).sum()
            vb = (w * (b - mb) ** 2).sum()
            cab = (w * (a - ma) * (b - mb)).sum()
            vals.append((2 * ma * mb + c1) * (2 * cab + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


@pytest.mark.parametrize("seed", range(4))
def test_ssim_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    x = rng.random((32, 32))
    y = np.clip(x + 0.2 * rng.standard_normal((32, 32)), 0, 1) if seed % 2 else rng.random((32, 32))
    assert abs(ssim(x, y) - brute_ssim(x, y)) < 1e-6


def test_ssim_identity_symmetry_bounds():
    rng = np.random.default_rng(1)
    a, b = rng.random((40, 33)), rng.random((40, 33))
    assert abs(ssim(a, a) - 1) < 1e-9
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-15)
    assert -1 <= ssim(a, 1 - a) <= 1
    with pytest.raises(ShapeError):
        ssim(np.zeros((10, 40)), np.zeros((10, 40)))
    with pytest.raises(ShapeError):
        ssim(a, b[:, :-1])


def test_pixel_metrics_exact_cases():
    t = np.random.default_rng(0).uniform(0, 0.8, (16, 16))
    assert pixel_metrics(t, t) == (0.0, 0.0, 0.0)
    mae, mse, rmse = pixel_metrics(t + 0.1, t)
    assert mae == pytest.approx(0.1, abs=1e-15)
    assert mse == pytest.approx(0.01, abs=1e-15)
    assert rmse == pytest.approx(0.1, abs=1e-15)
    assert psnr(1.0) == 0.0 and psnr(0.0) == math.inf
    with pytest.raises(ParameterError):
        psnr(-1e-9)


def test_pixel_metrics_skip_missing():
    a = np.array([[0.0, np.nan], [0.5, 1.0]])
    b = np.array([[0.1, 0.2], [np.nan, 1.0]])
    mae, _, _ = pixel_metrics(a, b)
    assert mae == pytest.approx(0.05)
    with pytest.raises(EvaluationError):
        pixel_metrics(np.full((2, 2), np.nan), b)


def test_evaluate_pair_dn_and_identity():
    rng = np.random.default_rng(3)
    truth = Grid(rng.integers(0, 54, (24, 24)).astype(np.float32), Units.DN)
    same = evaluate_pair(truth, truth)
    assert abs(same.ssim - 1) < 1e-9
    assert (same.psnr_db, same.mae, same.mse, same.rmse) == (math.inf, 0.0, 0.0, 0.0)
    shifted = Grid(truth.values + 6.3, Units.DN)
    r = evaluate_pair(shifted, truth)
    assert r.mae == pytest.approx(0.1, abs=1e-6)
    assert r.psnr_db == pytest.approx(20.0, abs=1e-4)


def test_parseval_random_grids():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        h, w = rng.integers(2, 70, 2)
        v = rng.standard_normal((h, w)) * rng.uniform(0.1, 5) + rng.uniform(-2, 2)
        spec = radial_psd(v)
        assert spec.count[0] == 1
        worst = max(worst, abs(spec.total_power() / np.mean(v ** 2) - 1))
    assert worst < 1e-6


def test_constant_and_impulse_spectra():
    spec = radial_psd(np.full((16, 20), 0.7))
    assert spec.mean_power[0] == pytest.approx(0.49, rel=1e-12)
    assert np.all(spec.mean_power[1:] < 1e-25)
    imp = np.zeros((16, 20))
    imp[3, 5] = 1
    spec = radial_psd(imp)
    np.testing.assert_allclose(spec.mean_power, 1 / (16 * 20) ** 2, rtol=1e-10)
    with pytest.raises(EvaluationError):
        radial_psd(np.array([[np.nan, 1], [0, 0]]))
    with pytest.raises(ShapeError):
        radial_psd(np.zeros((1, 8)))


def test_blur_lowers_high_wavenumber_power():
    drops = []
    for seed in range(20):
        noise = np.random.default_rng(seed).standard_normal((64, 64))
        raw, blurred = radial_psd(noise), radial_psd(gaussian_filter(noise, 1.5, mode="wrap"))
        lo, hi = top_quartile_band(raw)
        drops.append(blurred.mean_power[lo:hi].mean() - raw.mean_power[lo:hi].mean())
    assert np.mean(drops) < 0


def test_spectrum_distance_rules():
    v = np.random.default_rng(4).random((48, 48))
    a, b = radial_psd(v), radial_psd(2 * v)
    assert spectrum_distance(a, a) == 0.0
    for band in [(0, 5), (10, 20), top_quartile_band(a)]:
        assert spectrum_distance(b, a, band) == pytest.approx(math.log10(4), abs=1e-12)
    with pytest.raises(ParameterError):
        spectrum_distance(a, a, (0, a.n_bins + 1))
    with pytest.raises(ParameterError):
        spectrum_distance(a, radial_psd(v[:40, :40]))
    flat = radial_psd(np.ones((48, 48)))
    with pytest.raises(EvaluationError):
        spectrum_distance(flat, a, (1, 4))


def test_translation_invariance():
    v = np.random.default_rng(5).random((30, 36))
    a, b = radial_psd(v), radial_psd(np.roll(v, (7, -11), axis=(0, 1)))
    np.testing.assert_allclose(a.mean_power, b.mean_power, rtol=1e-10, atol=1e-20)


def test_spectrum_csv_roundtrip(tmp_path):
    spec = radial_psd(np.random.default_rng(6).random((20, 20)))
    for energy in (False, True):
        p = tmp_path / f"s{energy}.csv"
        write_spectrum_csv(p, spec, energy=energy)
        head = p.read_text().splitlines()[0]
        assert head == ("bin,wavenumber,energy,count" if energy else "bin,wavenumber,mean_power,count")
        back = read_spectrum_csv(p)
        np.testing.assert_array_equal(back.count, spec.count)
        np.testing.assert_allclose(back.mean_power, spec.mean_power, rtol=1e-15)


def test_metrics_csv_schema(tmp_path):
    report = MetricsReport(0.5, 20.0, 0.1, 0.01, 0.1)
    p = tmp_path / "m.csv"
    write_metrics_csv(p, [metrics_row("ddim", report, 1.5), metrics_row("viirs", report, None)])
    lines = p.read_text().splitlines()
    assert lines[0].split(",") == METRIC_COLUMNS
    assert lines[2].startswith("viirs,") and lines[2].endswith(",-")
