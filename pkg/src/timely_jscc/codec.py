"""Variable-length image codecs and rate-distortion profiling.

Two codecs share one surface (``num_symbols`` and ``roundtrip``):

* :class:`DctCodec` - analog block-DCT coding. The highest-energy coefficient
  positions are sent as scaled complex symbols and recovered with a
  per-coefficient linear MMSE estimate.
* :class:`SurrogateCodec` - a deterministic PSNR(eta, gamma) lookup, used when
  simulation speed matters more than pixels.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .channel import Codeword, snr_to_sigma2, transmit
from .metrics import psnr

BLOCK = 8


class RateTooLowError(ValueError):
    pass


class DecodeError(ValueError):
    pass


class DomainError(ValueError):
    pass


def dct_matrix(n: int = BLOCK) -> np.ndarray:
    """Orthonormal DCT-II matrix D, so coefficients of block B are D @ B @ D.T."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    d = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * math.sqrt(2.0 / n)
    d[0] /= math.sqrt(2.0)
    return d


_D = dct_matrix()


def _as_hwc(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    if img.ndim != 3:
        raise ValueError(f"expected an H x W or H x W x C image, got shape {img.shape}")
    return img


def num_symbols(shape: Sequence[int], eta: float) -> int:
    """K = round(eta * C * H * W)."""
    return int(round(eta * int(np.prod(shape))))


@dataclass
class SideMetadata:
    positions: np.ndarray      # sorted flat coefficient indices, one per real dimension sent
    variances: np.ndarray      # prior second moment of each retained coefficient
    shape: tuple               # original H, W, C
    padded_shape: tuple
    dc_offsets: np.ndarray     # per-channel mean DC coefficient
    scale: float               # symbols = scale * coefficients (0 for a flat image)
    K: int
    eta_requested: float
    clipped: bool = False

    @property
    def eta_realized(self) -> float:
        return self.K / float(np.prod(self.shape))


def _blockify(img: np.ndarray) -> np.ndarray:
    H, W, C = img.shape
    b = img.reshape(H // BLOCK, BLOCK, W // BLOCK, BLOCK, C)
    return b.transpose(4, 0, 2, 1, 3)  # C, Hb, Wb, 8, 8


def _unblockify(blocks: np.ndarray) -> np.ndarray:
    C, Hb, Wb, _, _ = blocks.shape
    return blocks.transpose(1, 3, 2, 4, 0).reshape(Hb * BLOCK, Wb * BLOCK, C)


class DctCodec:
    """Analog 8x8 block-DCT codec with variance-ranked coefficient selection."""

    deterministic = False

    def __init__(self, max_val: float = 255.0):
        self.max_val = max_val

    def num_symbols(self, image_or_shape, eta: float) -> int:
        shape = image_or_shape if isinstance(image_or_shape, tuple) else _as_hwc(image_or_shape).shape
        return num_symbols(shape, eta)

    def encode(self, image, gamma_db: float, eta: float) -> tuple[Codeword, SideMetadata]:
        # gamma_db enters only through the decoder's MMSE gain for this linear codec.
        if not 0 < eta <= 1:
            raise ValueError(f"eta must lie in (0, 1], got {eta}")
        img = _as_hwc(image)
        H, W, C = img.shape
        K = num_symbols(img.shape, eta)
        if K < 1:
            raise RateTooLowError(f"eta={eta} yields K={K} symbols for a {H}x{W}x{C} image")
        ph, pw = -H % BLOCK, -W % BLOCK
        padded = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="edge")
        coef = _D @ _blockify(padded) @ _D.T          # C, Hb, Wb, 8, 8
        dc = coef[:, :, :, 0, 0].mean(axis=(1, 2))
        coef[:, :, :, 0, 0] -= dc[:, None, None]
        # flat layout: position (c, u, v) major, block minor
        by_pos = coef.transpose(0, 3, 4, 1, 2).reshape(C * BLOCK * BLOCK, -1)
        nblocks = by_pos.shape[1]
        pos_var = np.mean(by_pos ** 2, axis=1)
        total = by_pos.size
        clipped = False
        if 2 * K > total:
            K = (total + 1) // 2
            clipped = True
        order = np.argsort(-pos_var, kind="stable")
        n_real = min(2 * K, total)
        flat_idx = (order[:, None] * nblocks + np.arange(nblocks)[None, :]).ravel()[:n_real]
        positions = np.sort(flat_idx)
        values = by_pos.ravel()[positions]
        variances = pos_var[positions // nblocks]
        reals = np.zeros(2 * K)
        reals[:n_real] = values
        sym = reals[0::2] + 1j * reals[1::2]
        power = float(np.mean(np.abs(sym) ** 2))
        # AC residue of a flat image is float round-off, not signal
        if power > (1e-9 * self.max_val) ** 2:
            scale = 1.0 / math.sqrt(power)
            sym = sym * scale
        else:
            # Nothing to send beyond the DC offsets; any unit-power word will do.
            scale = 0.0
            sym = np.ones(K, dtype=np.complex128)
        if clipped:
            warnings.warn(f"eta={eta} exceeds the coefficient budget; clipped to K={K}", stacklevel=2)
        meta = SideMetadata(
            positions=positions, variances=variances, shape=(H, W, C), padded_shape=padded.shape,
            dc_offsets=dc, scale=scale, K=K, eta_requested=eta, clipped=clipped,
        )
        return Codeword(sym), meta

    def decode(self, received, meta: SideMetadata, sigma2: float) -> np.ndarray:
        y = np.asarray(received, dtype=np.complex128).ravel()
        if y.size != meta.K:
            raise DecodeError(f"received {y.size} symbols, metadata expects {meta.K}")
        n = meta.positions.size
        reals = np.empty(2 * meta.K)
        reals[0::2], reals[1::2] = y.real, y.imag
        reals = reals[:n]
        P = meta.variances
        if meta.scale > 0:
            noise_var = sigma2 / 2.0 / meta.scale ** 2
            denom = P + noise_var
            gain = np.divide(P, denom, out=np.zeros_like(P), where=denom > 0)
            est = gain * reals / meta.scale
        else:
            est = np.zeros(n)
        Hp, Wp, C = meta.padded_shape
        Hb, Wb = Hp // BLOCK, Wp // BLOCK
        flat = np.zeros(C * BLOCK * BLOCK * Hb * Wb)
        flat[meta.positions] = est
        coef = flat.reshape(C, BLOCK, BLOCK, Hb, Wb).transpose(0, 3, 4, 1, 2).copy()
        coef[:, :, :, 0, 0] += meta.dc_offsets[:, None, None]
        img = _unblockify(_D.T @ coef @ _D)
        H, W, _ = meta.shape
        return np.clip(img[:H, :W], 0.0, self.max_val)

    def roundtrip(self, image, gamma_db: float, eta: float, rng: np.random.Generator) -> tuple[float, int]:
        """Encode, send over AWGN at ``gamma_db``, decode; returns (PSNR, K)."""
        img = _as_hwc(image)
        sigma2 = snr_to_sigma2(gamma_db)
        cw, meta = self.encode(img, gamma_db, eta)
        y = transmit(cw, sigma2, rng)
        rec = self.decode(y, meta, sigma2)
        return psnr(img, rec, self.max_val), meta.K


def encode_dct(image, gamma_db: float, eta: float) -> tuple[Codeword, SideMetadata]:
    return DctCodec().encode(image, gamma_db, eta)


def decode_dct(received, meta: SideMetadata, sigma2: float, max_val: float = 255.0) -> np.ndarray:
    return DctCodec(max_val).decode(received, meta, sigma2)


# --- surrogate rate-distortion models -------------------------------------------------

@dataclass(frozen=True)
class ParametricRdModel:
    """PSNR = clamp(floor + alpha * log2(1 + beta * eta * snr), lo, hi)."""

    p_floor: float = 18.0
    alpha: float = 6.0
    beta: float = 4.0
    p_min: float = 0.0
    p_max: float = 60.0

    def __call__(self, eta: float, gamma_db: float) -> float:
        if eta < 0:
            raise DomainError(f"eta must be >= 0, got {eta}")
        snr = 10.0 ** (gamma_db / 10.0)
        val = self.p_floor + self.alpha * math.log2(1.0 + self.beta * eta * snr)
        return min(max(val, self.p_min), self.p_max)


class TableRdModel:
    """Bilinear interpolation over a rectangular (eta, gamma_db) -> PSNR grid."""

    def __init__(self, etas, gammas, table, extrapolate: bool = False):
        self.etas = np.asarray(etas, dtype=np.float64)
        self.gammas = np.asarray(gammas, dtype=np.float64)
        self.table = np.asarray(table, dtype=np.float64).reshape(self.etas.size, self.gammas.size)
        self.extrapolate = extrapolate
        for axis, name in ((self.etas, "eta"), (self.gammas, "gamma_db")):
            if np.any(np.diff(axis) <= 0):
                raise ValueError(f"{name} grid must be strictly increasing")
        if np.any(np.diff(self.table, axis=0) < 0) or np.any(np.diff(self.table, axis=1) < 0):
            raise ValueError("PSNR table must be non-decreasing in eta and in gamma_db")

    @staticmethod
    def _locate(axis: np.ndarray, x: float) -> tuple[int, int, float]:
        if axis.size == 1:
            return 0, 0, 0.0
        j = int(np.clip(np.searchsorted(axis, x, side="right") - 1, 0, axis.size - 2))
        w = (x - axis[j]) / (axis[j + 1] - axis[j])
        return j, j + 1, float(np.clip(w, 0.0, 1.0))

    def __call__(self, eta: float, gamma_db: float) -> float:
        if not self.extrapolate:
            for x, axis, name in ((eta, self.etas, "eta"), (gamma_db, self.gammas, "gamma_db")):
                if axis.size > 1 and not axis[0] <= x <= axis[-1]:
                    raise DomainError(f"{name}={x} outside grid [{axis[0]}, {axis[-1]}]")
        i0, i1, wi = self._locate(self.etas, eta)
        j0, j1, wj = self._locate(self.gammas, gamma_db)
        t = self.table
        return float((1 - wi) * ((1 - wj) * t[i0, j0] + wj * t[i0, j1])
                     + wi * ((1 - wj) * t[i1, j0] + wj * t[i1, j1]))


def load_rd_table(path, extrapolate: bool = False) -> TableRdModel:
    """Read ``eta,gamma_db,psnr_db`` rows (sorted, rectangular grid)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        if header != ["eta", "gamma_db", "psnr_db"]:
            raise ValueError(f"unexpected RD table header {header}")
        rows = [tuple(float(v) for v in row) for row in reader if row]
    if not rows:
        raise ValueError("RD table has no rows")
    if rows != sorted(rows):
        raise ValueError("RD table rows must be sorted by (eta, gamma_db)")
    etas = sorted({r[0] for r in rows})
    gammas = sorted({r[1] for r in rows})
    if len(rows) != len(etas) * len(gammas):
        raise ValueError("RD table is not a rectangular grid")
    table = np.empty((len(etas), len(gammas)))
    for k, (e, g, p) in enumerate(rows):
        if (e, g) != (etas[k // len(gammas)], gammas[k % len(gammas)]):
            raise ValueError("RD table is not a rectangular grid")
        table[k // len(gammas), k % len(gammas)] = p
    return TableRdModel(etas, gammas, table, extrapolate)


def image_offset(eta: float, image_seed: Optional[int], jitter: float = 1.0,
                 eta_range: tuple = (1 / 48, 8 / 48)) -> float:
    """Per-image PSNR offset in [-jitter, jitter].

    Mostly a seeded rate sensitivity (the image gains more, or less, than the
    model average as eta moves across ``eta_range``) plus a residual level shift,
    so images differ in how much extra symbols help them.
    """
    if image_seed is None or jitter == 0:
        return 0.0
    slope, level = np.random.default_rng(image_seed).uniform(-1.0, 1.0, size=2)
    lo, hi = eta_range
    w = min(max(math.log(eta / lo) / math.log(hi / lo), 0.0), 1.0) if eta > 0 else 0.0
    return jitter * (slope * (2.0 * w - 1.0) + (1.0 - abs(slope)) * level)


def surrogate_psnr(model, eta: float, gamma_db: float, image_seed: Optional[int] = None,
                   jitter: float = 1.0) -> float:
    return model(eta, gamma_db) + image_offset(eta, image_seed, jitter)


class SurrogateCodec:
    """Deterministic stand-in codec. Images are integer seeds of a fixed nominal shape."""

    deterministic = True

    def __init__(self, model=None, shape=(32, 32, 3), jitter: float = 1.0):
        self.model = model if model is not None else ParametricRdModel()
        self.shape = tuple(shape)
        self.jitter = jitter

    def num_symbols(self, image, eta: float) -> int:
        return num_symbols(self.shape, eta)

    def roundtrip(self, image, gamma_db: float, eta: float, rng=None) -> tuple[float, int]:
        K = self.num_symbols(image, eta)
        if K < 1:
            raise RateTooLowError(f"eta={eta} yields K={K}")
        return surrogate_psnr(self.model, eta, gamma_db, image, self.jitter), K


# --- profiling --------------------------------------------------------------------------

def transmission_coefficient(psnr_max: float, psnr_min: float, L_max: float, L_min: float) -> float:
    """Quality gained per extra symbol, weighted by the best achievable quality."""
    if L_max == L_min:
        raise ZeroDivisionError("L_max equals L_min")
    if L_max < L_min:
        raise ValueError("L_max must exceed L_min")
    return (psnr_max - psnr_min) / (L_max - L_min) * psnr_max


@dataclass
class RdProfile:
    psnr_max: float
    psnr_min: float
    mu: float
    per_action: dict = field(default_factory=dict)   # eta -> mean PSNR (dB)
    symbols: dict = field(default_factory=dict)      # eta -> K


def profile_image(codec, image, gamma_db: float, action_set: Sequence[float], trials: int = 8,
                  rng: Optional[np.random.Generator] = None) -> RdProfile:
    actions = list(action_set)
    if not actions:
        raise ValueError("action set is empty")
    if actions != sorted(actions):
        raise ValueError("action set must be sorted ascending")
    rng = rng if rng is not None else np.random.default_rng(0)
    per_action, symbols = {}, {}
    for eta in actions:
        vals = []
        for _ in range(1 if codec.deterministic else trials):
            p, K = codec.roundtrip(image, gamma_db, eta, rng)
            vals.append(p)
        per_action[eta] = float(np.mean(vals))
        symbols[eta] = K
    lo, hi = actions[0], actions[-1]
    mu = transmission_coefficient(per_action[hi], per_action[lo], symbols[hi], symbols[lo])
    return RdProfile(per_action[hi], per_action[lo], mu, per_action, symbols)
