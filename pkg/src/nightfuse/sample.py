"""Inference procedures for noise-prediction and velocity checkpoints.

Every sampler starts from standard normal noise drawn from the SamplerSpec seed,
keeps its state in float64 and clamps the final patch to [-1, 1]. Batches of
patches are supported; each batch row owns its own noise generator so the
result for a tile does not depend on which other tiles share its batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import ParameterError, ShapeError, SpecError
from .network import Checkpoint, PrecisionMode, get_module, run_module
from .raster import Grid, Units, denormalize_dn, normalize_signed
from .schedule import NoiseSchedule, from_config, make_karras, nearest_timestep, subset_timesteps
from .train import FM_TIME_SCALE

METHODS = ("ddim", "ancestral", "lcm", "edm_heun", "pf_euler", "pf_heun", "fm_euler")
DEFAULT_STEPS = {"ddim": 30, "ancestral": None, "lcm": 4, "edm_heun": 30, "pf_euler": 30, "pf_heun": 30, "fm_euler": 30}


@dataclass(frozen=True)
class SamplerSpec:
    method: str = "ddim"
    steps: int | None = None
    seed: int = 0
    eta: float = 0.0
    # ddim only: clamp each intermediate x0 estimate and re-derive eps from it
    clip_x0: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ParameterError(f"unknown sampler {self.method!r}")
        if self.steps is None:
            object.__setattr__(self, "steps", DEFAULT_STEPS[self.method])
        if self.steps is not None and self.steps < 1:
            raise ParameterError("steps must be >= 1")
        if not 0.0 <= self.eta <= 1.0:
            raise ParameterError("eta must lie in [0, 1]")
        if self.clip_x0 and self.method != "ddim":
            raise ParameterError("clip_x0 applies to ddim only")

    @property
    def objective(self) -> str:
        return "velocity" if self.method == "fm_euler" else "noise"

    def steps_for(self, T: int) -> int:
        return T if self.steps is None else self.steps

    def with_seed(self, seed: int) -> "SamplerSpec":
        return replace(self, seed=seed)


class Predictor:
    """Wraps a checkpoint (or a plain callable) and counts network evaluations.

    ``calls`` counts invocations; ``evals`` counts per-patch evaluations, i.e.
    the sum of batch sizes over all invocations.
    """

    def __init__(self, model, mode: PrecisionMode | str = PrecisionMode.FULL32):
        self.model = model
        self.mode = PrecisionMode(mode)
        self.calls = 0
        self.evals = 0
        if isinstance(model, Checkpoint):
            self._net = get_module(model, self.mode)
            self.objective = model.objective
        else:
            self._net = None
            self.objective = getattr(model, "objective", None)

    def __call__(self, x: torch.Tensor, y: torch.Tensor, t) -> torch.Tensor:
        tt = torch.as_tensor(t, dtype=torch.float64).reshape(-1).expand(x.shape[0])
        self.calls += 1
        self.evals += x.shape[0]
        if self._net is None:
            return torch.as_tensor(self.model(x, y, tt), dtype=torch.float64)
        return run_module(self._net, x.float(), y.float(), tt).double()

    def reset(self) -> None:
        self.calls = self.evals = 0


def as_predictor(model, mode: PrecisionMode | str = PrecisionMode.FULL32) -> Predictor:
    return model if isinstance(model, Predictor) else Predictor(model, mode)


class NoiseSource:
    """One torch generator per batch row; draws are independent of batch composition."""

    def __init__(self, seeds: Sequence[int], shape: tuple[int, ...]):
        self.shape = shape
        self.gens = []
        for s in seeds:
            g = torch.Generator()
            g.manual_seed(int(s) % (2 ** 63))
            self.gens.append(g)

    def draw(self) -> torch.Tensor:
        return torch.stack([
            torch.randn(self.shape, generator=g, dtype=torch.float32) for g in self.gens
        ]).double()


def _check_objective(pred: Predictor, method: str) -> None:
    need = "velocity" if method == "fm_euler" else "noise"
    if pred.objective is not None and pred.objective != need:
        raise SpecError(f"{method} requires a {need}-objective checkpoint, got {pred.objective}")


def ddim(pred: Predictor, y: torch.Tensor, sched: NoiseSchedule, spec: SamplerSpec, noise: NoiseSource) -> torch.Tensor:
    taus = subset_timesteps(sched.T, spec.steps_for(sched.T))
    x = noise.draw()
    for i, tau in enumerate(taus):
        ab = sched.alpha_bar[tau - 1]
        eps = pred(x, y, float(tau))
        x0 = (x - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
        if spec.clip_x0:
            x0 = x0.clamp(-1.0, 1.0)
            eps = (x - math.sqrt(ab) * x0) / math.sqrt(1.0 - ab)
        if i == len(taus) - 1:
            x = x0
            break
        ab_next = sched.alpha_bar[taus[i + 1] - 1]
        sigma = spec.eta * math.sqrt((1 - ab_next) / (1 - ab)) * math.sqrt(1 - ab / ab_next)
        x = math.sqrt(ab_next) * x0 + math.sqrt(1.0 - ab_next - sigma ** 2) * eps
        if sigma > 0:
            x = x + sigma * noise.draw()
    return x.clamp(-1.0, 1.0)


def ancestral(
    pred: Predictor, y, sched: NoiseSchedule, spec: SamplerSpec, noise: NoiseSource, inject_noise: bool = True
) -> torch.Tensor:
    """DDPM posterior sampling over every timestep; the final step adds no noise."""
    if spec.steps_for(sched.T) != sched.T:
        raise SpecError(f"ancestral sampling runs all {sched.T} steps, got steps={spec.steps}")
    x = noise.draw()
    for t in range(sched.T, 0, -1):
        beta, alpha, ab = sched.beta[t - 1], sched.alpha[t - 1], sched.alpha_bar[t - 1]
        eps = pred(x, y, float(t))
        x = (x - beta / math.sqrt(1.0 - ab) * eps) / math.sqrt(alpha)
        if t > 1 and inject_noise:
            var = beta * (1.0 - sched.alpha_bar[t - 2]) / (1.0 - ab)
            x = x + math.sqrt(var) * noise.draw()
    return x.clamp(-1.0, 1.0)


def lcm(pred: Predictor, y, sched: NoiseSchedule, spec: SamplerSpec, noise: NoiseSource) -> torch.Tensor:
    """Few-step consistency-style sampling: predict, clamp, re-noise to the next timestep."""
    taus = subset_timesteps(sched.T, spec.steps_for(sched.T))
    x = noise.draw()
    x0 = x
    for i, tau in enumerate(taus):
        ab = sched.alpha_bar[tau - 1]
        eps = pred(x, y, float(tau))
        x0 = ((x - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)).clamp(-1.0, 1.0)
        if i < len(taus) - 1:
            ab_next = sched.alpha_bar[taus[i + 1] - 1]
            x = math.sqrt(ab_next) * x0 + math.sqrt(1.0 - ab_next) * noise.draw()
    return x0


def heun_sigma_ladder(denoise: Callable, x: torch.Tensor, sigmas: np.ndarray) -> torch.Tensor:
    """Second-order integration of dx/dσ = (x - D(x, σ))/σ down a σ ladder ending at 0."""
    for i in range(len(sigmas) - 1):
        s, s_next = float(sigmas[i]), float(sigmas[i + 1])
        d = (x - denoise(x, s)) / s
        x_pred = x + (s_next - s) * d
        if s_next > 0:
            d_next = (x_pred - denoise(x_pred, s_next)) / s_next
            x = x + (s_next - s) * 0.5 * (d + d_next)
        else:
            x = x_pred
    return x


def edm_heun(pred: Predictor, y, sched: NoiseSchedule, spec: SamplerSpec, noise: NoiseSource, **karras) -> torch.Tensor:
    sig = make_karras(N=spec.steps_for(sched.T), **karras).sigma

    def denoise(x, sigma):
        t = nearest_timestep(sched, sigma)
        ab = sched.alpha_bar[t - 1]
        x_vp = x / math.sqrt(1.0 + sigma ** 2)
        return (x_vp - math.sqrt(1.0 - ab) * pred(x_vp, y, float(t))) / math.sqrt(ab)

    x = float(sig[0]) * noise.draw()
    return heun_sigma_ladder(denoise, x, sig).clamp(-1.0, 1.0)


def pf_grid(T: int, steps: int) -> np.ndarray:
    """Uniform timestep grid from T down to 1 (inclusive) with `steps` intervals."""
    return T - (T - 1) * np.arange(steps + 1) / steps


def pf_drift(pred: Predictor, sched: NoiseSchedule, x, y, tau: float) -> torch.Tensor:
    """d x / d tau of the variance-preserving probability-flow ODE."""
    vp = sched.continuous
    ab = vp.alpha_bar(tau)
    score_term = pred(x, y, tau) / math.sqrt(1.0 - ab)
    return -0.5 * vp.rate(tau) * (x - score_term)


def pf_euler(pred: Predictor, y, sched: NoiseSchedule, spec: SamplerSpec, noise: NoiseSource) -> torch.Tensor:
    return _pf_solve(pred, y, sched, spec, noise, heun=False)


def pf_heun(pred: Predictor, y, sched: NoiseSchedule, spec: SamplerSpec, noise: NoiseSource) -> torch.Tensor:
    return _pf_solve(pred, y, sched, spec, noise, heun=True)


def _pf_solve(pred, y, sched, spec, noise, heun: bool, x=None, clamp: bool = True):
    grid = pf_grid(sched.T, spec.steps_for(sched.T))
    x = noise.draw() if x is None else x
    for k in range(len(grid) - 1):
        tau, tau_next = float(grid[k]), float(grid[k + 1])
        h = tau_next - tau
        f = pf_drift(pred, sched, x, y, tau)
        if heun:
            x_pred = x + h * f
            x = x + h * 0.5 * (f + pf_drift(pred, sched, x_pred, y, tau_next))
        else:
            x = x + h * f
    return x.clamp(-1.0, 1.0) if clamp else x


def fm_euler(pred: Predictor, y, sched, spec: SamplerSpec, noise: NoiseSource) -> torch.Tensor:
    steps = spec.steps_for(0)
    x = noise.draw()
    for i in range(steps):
        t = 1.0 - i / steps
        x = x - pred(x, y, t * FM_TIME_SCALE) / steps
    return x.clamp(-1.0, 1.0)


_DISPATCH = {
    "ddim": ddim,
    "ancestral": ancestral,
    "lcm": lcm,
    "edm_heun": edm_heun,
    "pf_euler": pf_euler,
    "pf_heun": pf_heun,
    "fm_euler": fm_euler,
}


def _resolve_schedule(model, sched):
    if sched is not None:
        return sched
    inner = model.model if isinstance(model, Predictor) else model
    if isinstance(inner, Checkpoint):
        return from_config(inner.schedule)
    return None


def sample_batch(model, y: np.ndarray, spec: SamplerSpec, seeds: Sequence[int], sched=None,
                 mode: PrecisionMode | str = PrecisionMode.FULL32) -> np.ndarray:
    """Sample a batch of conditions (n, 1, p, p) with one seed per row."""
    pred = as_predictor(model, mode)
    _check_objective(pred, spec.method)
    sched = _resolve_schedule(model, sched)
    if sched is None and spec.method != "fm_euler":
        raise SpecError(f"{spec.method} needs a noise schedule")
    yb = torch.tensor(np.asarray(y, dtype=np.float32), dtype=torch.float64)
    if yb.ndim != 4 or len(seeds) != yb.shape[0]:
        raise ShapeError("expected (n, 1, p, p) conditions and one seed per row")
    noise = NoiseSource(seeds, tuple(yb.shape[1:]))
    out = _DISPATCH[spec.method](pred, yb, sched, spec, noise)
    return out.float().numpy()


def sample(model, y, spec: SamplerSpec, sched=None, mode: PrecisionMode | str = PrecisionMode.FULL32) -> np.ndarray:
    """Sample one patch conditioned on `y` (a p x p signed array)."""
    y = np.asarray(y, dtype=np.float32)
    if y.ndim != 2:
        raise ShapeError("condition patch must be 2-D")
    return sample_batch(model, y[None, None], spec, [spec.seed], sched, mode)[0, 0]


def tile_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(2, np.uint64)[0] >> np.uint64(1))


def _tiles(values: np.ndarray, patch: int):
    h, w = values.shape
    rows, cols = h // patch, w // patch
    tiles = values[: rows * patch, : cols * patch].reshape(rows, patch, cols, patch).transpose(0, 2, 1, 3)
    return tiles.reshape(rows * cols, 1, patch, patch), rows, cols


def _stitch(tiles: np.ndarray, rows: int, cols: int, patch: int) -> np.ndarray:
    return tiles.reshape(rows, cols, patch, patch).transpose(0, 2, 1, 3).reshape(rows * patch, cols * patch)


def _signed_values(cond: Grid) -> np.ndarray:
    if cond.units == Units.SIGNED:
        return cond.values
    if cond.units == Units.DN:
        return normalize_signed(cond).values
    raise ShapeError("condition grid must be in dn or signed units")


def fuse_signed(cond: Grid, model, spec: SamplerSpec, sched=None, mode=PrecisionMode.FULL32,
                patch: int = 32, batch_size: int = 64) -> np.ndarray:
    """Tile, sample and stitch in signed units; output covers the cropped input."""
    values = _signed_values(cond)
    if values.shape[0] < patch or values.shape[1] < patch:
        raise ShapeError(f"grid {cond.width}x{cond.height} smaller than one {patch}x{patch} patch")
    if np.isnan(values).any():
        raise ShapeError("condition grid has missing values")
    tiles, rows, cols = _tiles(values, patch)
    pred = as_predictor(model, mode)
    seeds = [tile_seed(spec.seed, i) for i in range(len(tiles))]
    out = np.empty_like(tiles)
    for i in range(0, len(tiles), batch_size):
        out[i:i + batch_size] = sample_batch(pred, tiles[i:i + batch_size], spec, seeds[i:i + batch_size],
                                             _resolve_schedule(model, sched), mode)
    return _stitch(out, rows, cols, patch)


def fuse_full(cond: Grid, model, spec: SamplerSpec, sched=None, mode=PrecisionMode.FULL32,
              patch: int = 32, batch_size: int = 64) -> Grid:
    """Full-scene fusion: normalize, tile, sample each tile, stitch, map back to DN."""
    return denormalize_dn(fuse_signed(cond, model, spec, sched, mode, patch, batch_size))


@dataclass(frozen=True)
class EnsembleResult:
    mean: Grid
    std: Grid
    n: int


def ensemble(model, y, spec: SamplerSpec, n: int = 5, sched=None, mode=PrecisionMode.FULL32) -> EnsembleResult:
    """Per-pixel mean and population std over members seeded spec.seed + 0..n-1.

    `y` is a single signed patch or a dn/signed Grid (fused tile by tile).
    """
    if n < 1:
        raise ParameterError("ensemble needs at least one member")
    members = []
    for i in range(n):
        member_spec = spec.with_seed(spec.seed + i)
        if isinstance(y, Grid):
            members.append(fuse_signed(y, model, member_spec, sched, mode))
        else:
            members.append(sample(model, y, member_spec, sched, mode))
    stack = np.stack(members).astype(np.float64)
    mean = stack.mean(axis=0)
    std = stack.std(axis=0) if n > 1 else np.zeros_like(mean)
    return EnsembleResult(
        Grid(mean.astype(np.float32), Units.SIGNED),
        Grid(np.clip(std, 0.0, 1.0).astype(np.float32), Units.UNIT),
        n,
    )
