"""AWGN symbol channel, SNR bookkeeping, intermittent availability and baud-rate delay.

Noise convention: total complex variance ``sigma2`` is split evenly across the
real and imaginary parts, so SNR = 1 / sigma2 under unit signal power.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

IDLE = "idle"
BUSY = "busy"


class DegenerateSignalError(ValueError):
    pass


class ChannelConfigError(ValueError):
    pass


@dataclass
class Codeword:
    symbols: np.ndarray

    @property
    def K(self) -> int:
        return int(self.symbols.size)

    def power(self) -> float:
        return float(np.mean(np.abs(self.symbols) ** 2))


def power_normalize(symbols) -> Codeword:
    x = np.asarray(symbols, dtype=np.complex128).ravel()
    if x.size == 0:
        raise DegenerateSignalError("codeword is empty")
    p = float(np.mean(np.abs(x) ** 2))
    if p == 0.0:
        raise DegenerateSignalError("cannot normalise an all-zero codeword")
    return Codeword(x / math.sqrt(p))


def snr_to_sigma2(gamma_db: float) -> float:
    if not math.isfinite(gamma_db):
        raise ValueError(f"SNR must be finite, got {gamma_db}")
    return 10.0 ** (-gamma_db / 10.0)


def db_to_linear(gamma_db: float) -> float:
    return 10.0 ** (gamma_db / 10.0)


def transmit(cw: Codeword | np.ndarray, sigma2: float, rng: np.random.Generator) -> np.ndarray:
    """y = x + n with n ~ CN(0, sigma2)."""
    x = cw.symbols if isinstance(cw, Codeword) else np.asarray(cw, dtype=np.complex128)
    if sigma2 < 0:
        raise ValueError("sigma2 must be >= 0")
    if sigma2 == 0:
        return x.copy()
    scale = math.sqrt(sigma2 / 2.0)
    noise = rng.normal(0.0, scale, size=(2, x.size))
    return x + (noise[0] + 1j * noise[1])


def tx_delay(K: int, baud: float) -> float:
    if not baud > 0:
        raise ChannelConfigError(f"baud rate must be positive, got {baud}")
    if K < 0:
        raise ChannelConfigError(f"symbol count must be >= 0, got {K}")
    return K / baud


@dataclass
class AvailabilityChain:
    """Two-state Markov chain over {idle, busy}, stepped once per check interval."""

    p_idle_to_busy: float = 0.0
    p_busy_to_idle: float = 1.0
    state: str = IDLE

    def __post_init__(self):
        for name in ("p_idle_to_busy", "p_busy_to_idle"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ChannelConfigError(f"{name} must lie in [0, 1], got {p}")
        if self.state not in (IDLE, BUSY):
            raise ChannelConfigError(f"unknown availability state {self.state!r}")

    def step(self, rng: np.random.Generator) -> str:
        if self.state == IDLE:
            # Skip the draw so an always-idle channel leaves the stream untouched.
            if self.p_idle_to_busy > 0 and rng.random() < self.p_idle_to_busy:
                self.state = BUSY
        elif self.p_busy_to_idle >= 1 or rng.random() < self.p_busy_to_idle:
            self.state = IDLE
        return self.state

    @property
    def stationary_idle(self) -> float:
        total = self.p_idle_to_busy + self.p_busy_to_idle
        return 1.0 if total == 0 else self.p_busy_to_idle / total


@dataclass
class LinkState:
    gamma_db: float
    baud: float
    availability: AvailabilityChain = field(default_factory=AvailabilityChain)

    @property
    def sigma2(self) -> float:
        return snr_to_sigma2(self.gamma_db)

    @property
    def gamma_linear(self) -> float:
        return db_to_linear(self.gamma_db)


def availability_step(state: LinkState, rng: np.random.Generator) -> str:
    return state.availability.step(rng)


class GammaSchedule:
    """Per-transmission SNR: fixed, or a seeded reflecting random walk over [lo, hi] dB."""

    def __init__(self, kind: str = "fixed", gamma_db: float = 7.0, lo: float = 1.0, hi: float = 13.0,
                 step_db: float = 1.0, seed: int = 0):
        if kind not in ("fixed", "random_walk"):
            raise ChannelConfigError(f"unknown gamma schedule {kind!r}")
        if kind == "random_walk" and not lo <= gamma_db <= hi:
            raise ChannelConfigError("random-walk start must lie inside [lo, hi]")
        self.kind = kind
        self.start = gamma_db
        self.lo, self.hi, self.step_db = lo, hi, step_db
        self.seed = seed
        self.reset()

    def reset(self, seed: int | None = None):
        if seed is not None:
            self.seed = seed
        self._rng = np.random.default_rng(self.seed)
        self.current = self.start

    def next(self) -> float:
        """SNR for the next transmission."""
        value = self.current
        if self.kind == "random_walk":
            g = self.current + self._rng.choice((-self.step_db, self.step_db))
            if g > self.hi:
                g = 2 * self.hi - g
            if g < self.lo:
                g = 2 * self.lo - g
            self.current = float(min(max(g, self.lo), self.hi))
        return value
