"""Noise-level ladders: discrete beta schedules, the Karras sigma ladder and helpers."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import ParameterError


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Betas indexed 1..T; arrays are stored 0-based (``beta[t - 1]``)."""

    kind: str
    T: int
    beta: np.ndarray
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64).copy()
        beta.flags.writeable = False
        object.__setattr__(self, "beta", beta)

    @cached_property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    @cached_property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(self.alpha)

    def alpha_bar_at(self, t) -> np.ndarray | float:
        """ᾱ_t with the convention ᾱ_0 = 1."""
        t = np.asarray(t)
        padded = np.concatenate([[1.0], self.alpha_bar])
        return padded[t]

    def config(self) -> dict:
        return {"kind": self.kind, "T": self.T, **self.params}

    @cached_property
    def continuous(self) -> "ContinuousVP":
        return ContinuousVP(self)


def make_linear(T: int = 1000, b1: float = 1e-4, bT: float = 0.02) -> NoiseSchedule:
    if T < 2:
        raise ParameterError("T must be >= 2")
    if not (0 < b1 <= bT < 1):
        raise ParameterError(f"need 0 < b1 <= bT < 1, got b1={b1}, bT={bT}")
    t = np.arange(1, T + 1, dtype=np.float64)
    beta = b1 + (t - 1) / (T - 1) * (bT - b1)
    beta[0], beta[-1] = b1, bT
    return NoiseSchedule("linear", T, beta, {"b1": b1, "bT": bT})


def make_cosine(T: int = 1000, s: float = 0.008, beta_max: float = 0.999) -> NoiseSchedule:
    if T < 2:
        raise ParameterError("T must be >= 2")
    if s <= 0 or not (0 < beta_max < 1):
        raise ParameterError(f"invalid cosine parameters s={s}, beta_max={beta_max}")
    t = np.arange(0, T + 1, dtype=np.float64)
    f = np.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2
    ab = f / f[0]
    beta = np.minimum(1.0 - ab[1:] / ab[:-1], beta_max)
    return NoiseSchedule("cosine", T, beta, {"s": s, "beta_max": beta_max})


def from_config(cfg: dict) -> NoiseSchedule:
    cfg = dict(cfg)
    kind = cfg.pop("kind", "linear")
    if kind == "linear":
        return make_linear(**cfg)
    if kind == "cosine":
        return make_cosine(**cfg)
    raise ParameterError(f"unknown schedule kind {kind!r}")


@dataclass(frozen=True, eq=False)
class KarrasSigmas:
    N: int
    rho: float
    sigma_min: float
    sigma_max: float
    sigma: np.ndarray


def make_karras(N: int = 30, rho: float = 7.0, sigma_min: float = 0.002, sigma_max: float = 80.0) -> KarrasSigmas:
    if N < 2:
        raise ParameterError("N must be >= 2")
    if not (0 < sigma_min < sigma_max):
        raise ParameterError("need 0 < sigma_min < sigma_max")
    i = np.arange(N, dtype=np.float64)
    lo, hi = sigma_min ** (1 / rho), sigma_max ** (1 / rho)
    sig = (hi + i / (N - 1) * (lo - hi)) ** rho
    sig[0], sig[-1] = sigma_max, sigma_min
    sigma = np.append(sig, 0.0)
    sigma.flags.writeable = False
    return KarrasSigmas(N, rho, sigma_min, sigma_max, sigma)


def vp_sigma(sched: NoiseSchedule, t) -> np.ndarray | float:
    """Variance-exploding noise level √((1-ᾱ_t)/ᾱ_t) of discrete timestep t."""
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > sched.T):
        raise ParameterError(f"timestep outside [1, {sched.T}]")
    ab = sched.alpha_bar[t_arr - 1]
    out = np.sqrt((1.0 - ab) / ab)
    return float(out) if out.ndim == 0 else out


def nearest_timestep(sched: NoiseSchedule, sigma: float) -> int:
    """argmin_t |vp_sigma(t) - sigma|, ties resolved toward the smaller t."""
    if sigma < 0:
        raise ParameterError("sigma must be non-negative")
    table = _sigma_table(sched)
    j = int(np.searchsorted(table, sigma))
    if j == 0:
        return 1
    if j == len(table):
        return len(table)
    below, above = table[j - 1], table[j]
    return j if sigma - below <= above - sigma else j + 1


def _sigma_table(sched: NoiseSchedule) -> np.ndarray:
    cached = sched.__dict__.get("_sigma_table")
    if cached is None:
        ab = sched.alpha_bar
        cached = np.sqrt((1.0 - ab) / ab)
        sched.__dict__["_sigma_table"] = cached
    return cached


def subset_timesteps(T: int, n: int) -> np.ndarray:
    if not 1 <= n <= T:
        raise ParameterError(f"need 1 <= n <= T, got n={n}, T={T}")
    stride = T // n
    return T - stride * np.arange(n)


class ContinuousVP:
    """Smooth continuous-time view of a discrete schedule for ODE integration.

    log ᾱ is interpolated by a cubic spline through the knots (τ, log ᾱ_τ) for
    τ = 0..T, so it agrees with the discrete schedule at every integer
    timestep while its rate  -d log ᾱ/dτ  stays continuously differentiable.
    """

    def __init__(self, sched: NoiseSchedule):
        knots = np.arange(0, sched.T + 1, dtype=np.float64)
        log_ab = np.concatenate([[0.0], np.log(sched.alpha_bar)])
        self.T = sched.T
        self._spline = CubicSpline(knots, log_ab)
        self._rate = self._spline.derivative()

    def alpha_bar(self, tau: float) -> float:
        return float(np.exp(self._spline(tau)))

    def rate(self, tau: float) -> float:
        """Instantaneous beta per unit of τ (> 0)."""
        return max(float(-self._rate(tau)), 0.0)
