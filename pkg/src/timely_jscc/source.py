"""Periodic image source, single-slot transmit buffer, and a synthetic image corpus."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Optional, Sequence

import numpy as np


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class SampleRecord:
    index: int
    generation_time: float
    image_id: int


class SingleSlotBuffer:
    """Holds only the freshest waiting sample; an arrival evicts the previous one."""

    def __init__(self):
        self.occupant: Optional[SampleRecord] = None

    def offer(self, sample: SampleRecord) -> Optional[SampleRecord]:
        evicted, self.occupant = self.occupant, sample
        return evicted

    def take(self) -> Optional[SampleRecord]:
        sample, self.occupant = self.occupant, None
        return sample

    def __len__(self):
        return 0 if self.occupant is None else 1


class PeriodicSource:
    """Emits sample ``n`` at time ``n * Ts``, cycling through ``dataset``.

    With ``shuffle=True`` the dataset is visited in a seeded random order per pass.
    """

    def __init__(self, dataset: Sequence[Any], Ts: float, shuffle: bool = False, seed: int = 0):
        if len(dataset) == 0:
            raise ConfigurationError("dataset is empty")
        if not Ts > 0:
            raise ConfigurationError(f"sampling interval must be positive, got {Ts}")
        self.dataset = dataset
        self.Ts = float(Ts)
        self.shuffle = shuffle
        self.seed = seed
        self._orders: dict[int, np.ndarray] = {}

    def _image_id(self, n: int) -> int:
        size = len(self.dataset)
        if not self.shuffle:
            return n % size
        rnd = n // size
        if rnd not in self._orders:
            self._orders[rnd] = np.random.default_rng([self.seed, rnd]).permutation(size)
        return int(self._orders[rnd][n % size])

    def sample_at(self, n: int) -> SampleRecord:
        if n < 0:
            raise ConfigurationError(f"sample index must be >= 0, got {n}")
        return SampleRecord(index=n, generation_time=n * self.Ts, image_id=self._image_id(n))

    def image(self, record: SampleRecord):
        return self.dataset[record.image_id]


def sample_at(n: int, Ts: float, dataset: Sequence[Any]) -> SampleRecord:
    return PeriodicSource(dataset, Ts).sample_at(n)


def synthetic_image(rng: np.random.Generator, height: int = 32, width: int = 32, channels: int = 3) -> np.ndarray:
    """Smooth random scene in [0, 255]: gradient sky, a few blobs and rectangles, mild texture."""
    yy, xx = np.mgrid[0:height, 0:width] / max(height, width)
    img = np.empty((height, width, channels))
    base = rng.uniform(40, 200, size=channels)
    tilt = rng.uniform(-80, 80, size=(2, channels))
    for c in range(channels):
        img[..., c] = base[c] + tilt[0, c] * yy + tilt[1, c] * xx
    for _ in range(rng.integers(1, 5)):
        cy, cx = rng.uniform(0, 1, size=2)
        r = rng.uniform(0.05, 0.3)
        amp = rng.uniform(-90, 90, size=channels)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
        img += blob[..., None] * amp
    for _ in range(rng.integers(0, 3)):
        y0, x0 = rng.integers(0, height - 2), rng.integers(0, width - 2)
        h, w = rng.integers(2, max(3, height // 3)), rng.integers(2, max(3, width // 3))
        img[y0 : y0 + h, x0 : x0 + w] += rng.uniform(-60, 60, size=channels)
    img += rng.normal(0, rng.uniform(1, 12), size=img.shape)
    return np.clip(img, 0, 255)


def synthetic_corpus(n: int, height: int = 32, width: int = 32, channels: int = 3, seed: int = 0) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [synthetic_image(rng, height, width, channels) for _ in range(n)]
