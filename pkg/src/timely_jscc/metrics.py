"""Freshness and fidelity metrics: age of information, value of information, PSNR.

All functions are pure. VoI uses the closed form for a stationary Gauss-Markov
source observed through a link with SNR ``gamma``::

    VoI = -log(1 - gamma / (1 + gamma) * rho ** age)
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

PSNR_CAP_DB = 100.0
DEFAULT_QUAD_STEP = 1e-3


class TimelineError(ValueError):
    """Raised for negative ages or out-of-order update traces."""


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class VoiParams:
    rho: float = 0.1
    log_base: str = "natural"

    def __post_init__(self):
        if not (0.0 <= self.rho <= 1.0) or math.isnan(self.rho):
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        if self.log_base not in ("natural", "base2"):
            raise ValueError(f"log_base must be 'natural' or 'base2', got {self.log_base!r}")


@dataclass(frozen=True)
class TimelineState:
    now: float
    last_generation: float

    def __post_init__(self):
        if self.now < self.last_generation:
            raise TimelineError(
                f"now={self.now} precedes last generation time {self.last_generation}"
            )

    @property
    def aoi(self) -> float:
        return self.now - self.last_generation


def aoi(now: float, generation_time: float) -> float:
    age = now - generation_time
    if age < 0:
        raise TimelineError(f"negative age: now={now}, generation_time={generation_time}")
    return age


def _log_scale(params: VoiParams) -> float:
    return 1.0 / math.log(2.0) if params.log_base == "base2" else 1.0


def voi(gamma_linear: float, params: VoiParams, age: float) -> float:
    """Value of information held by an update of age ``age`` seconds.

    ``rho`` is a per-second correlation, so ``rho ** age`` uses real-valued age.
    An infinite age (nothing received) gives zero for ``rho < 1``.
    """
    if not math.isfinite(gamma_linear) or gamma_linear < 0:
        raise ValueError(f"gamma_linear must be finite and >= 0, got {gamma_linear}")
    if age < 0 or math.isnan(age):
        raise TimelineError(f"age must be >= 0, got {age}")
    # 0 ** 0 == 1 in Python, which is the convention we want at zero age.
    corr = params.rho ** age
    frac = gamma_linear / (1.0 + gamma_linear) * corr
    return -math.log1p(-frac) * _log_scale(params)


def voi_array(gamma_linear: float, params: VoiParams, ages: np.ndarray) -> np.ndarray:
    """Vectorised :func:`voi`. ``np.inf`` ages map to the rho**inf limit."""
    ages = np.asarray(ages, dtype=np.float64)
    if not math.isfinite(gamma_linear) or gamma_linear < 0:
        raise ValueError(f"gamma_linear must be finite and >= 0, got {gamma_linear}")
    if np.any(ages < 0) or np.any(np.isnan(ages)):
        raise TimelineError("ages must be >= 0")
    corr = np.power(params.rho, ages)
    return -np.log1p(-gamma_linear / (1.0 + gamma_linear) * corr) * _log_scale(params)


def psnr(a: np.ndarray, b: np.ndarray, max_val: float = 255.0, cap: float = PSNR_CAP_DB) -> float:
    """Peak signal-to-noise ratio in dB, capped at ``cap`` (identical images)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    if max_val <= 0:
        raise ValueError("max_val must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(max_val * max_val / mse))


def _check_sorted(updates: Sequence[tuple[float, float]]):
    for (r0, _), (r1, _) in zip(updates, updates[1:]):
        if r1 < r0:
            raise TimelineError(f"updates not sorted by reception time ({r0} > {r1})")
    for r, u in updates:
        if r < u:
            raise TimelineError(f"reception {r} precedes generation {u}")


def age_profile(updates: Sequence[tuple[float, float]], t: np.ndarray) -> np.ndarray:
    """AoI at times ``t`` given (reception, generation) updates; inf before the first one."""
    updates = list(updates)
    t = np.asarray(t, dtype=np.float64)
    if not updates:
        return np.full_like(t, np.inf)
    recv = np.array([r for r, _ in updates])
    gen = np.array([u for _, u in updates])
    idx = np.searchsorted(recv, t, side="right") - 1
    ages = np.full_like(t, np.inf)
    seen = idx >= 0
    ages[seen] = t[seen] - gen[idx[seen]]
    return ages


def time_average_voi(
    updates: Iterable[tuple[float, float]],
    horizon: float,
    params: VoiParams,
    gamma_linear,
    step: float = DEFAULT_QUAD_STEP,
) -> float:
    """(1/T) * integral of VoI(t) over [0, T], trapezoidal rule at resolution ``step``.

    VoI is zero before the first reception. ``gamma_linear`` is a scalar or one
    value per update.
    """
    updates = list(updates)
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    if step <= 0:
        raise ValueError("step must be positive")
    _check_sorted(updates)
    if not updates:
        return 0.0
    n = int(math.floor(horizon / step + 1e-9))
    t = np.arange(n + 1) * step
    if t[-1] < horizon:
        t = np.append(t, horizon)
    ages = age_profile(updates, t)
    vals = np.zeros_like(t)
    finite = np.isfinite(ages)
    if np.ndim(gamma_linear) == 0:
        vals[finite] = voi_array(float(gamma_linear), params, ages[finite])
    else:
        # per-update link SNR: each interval uses the SNR of the update that opened it
        gammas = np.asarray(gamma_linear, dtype=np.float64)
        if gammas.size != len(updates):
            raise ValueError("need one gamma per update")
        owner = np.searchsorted([r for r, _ in updates], t, side="right") - 1
        for k in np.unique(owner[finite]):
            sel = finite & (owner == k)
            vals[sel] = voi_array(float(gammas[k]), params, ages[sel])
    integral = float(np.sum(0.5 * (vals[1:] + vals[:-1]) * np.diff(t)))
    return integral / horizon


def per_decision_mean(values: Sequence[float]) -> float:
    values = list(values)
    return float(np.mean(values)) if values else 0.0
