"""Per-channel 2-D DCT, spectrum rotation and spectral mixing transforms."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from featherstorm.data import ImageTensor, RandomStream


@dataclass
class Spectrum:
    coeffs: np.ndarray

    @property
    def source_shape(self):
        return self.coeffs.shape

    def __add__(self, other):
        return Spectrum(self.coeffs + other.coeffs)

    def __mul__(self, k):
        return Spectrum(self.coeffs * k)

    __rmul__ = __mul__


def _pixels(image) -> np.ndarray:
    arr = image.pixels if isinstance(image, ImageTensor) else np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"expected an H x W x C array, got shape {arr.shape}")
    return arr


def _coeffs(spec) -> np.ndarray:
    return _pixels(spec.coeffs if isinstance(spec, Spectrum) else spec)


@lru_cache(maxsize=None)
def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II basis; row k is frequency k."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(math.pi * (2 * i + 1) * k / (2 * n))
    m[0] *= math.sqrt(1.0 / n)
    m[1:] *= math.sqrt(2.0 / n)
    m.setflags(write=False)
    return m


def dct2(image) -> Spectrum:
    x = _pixels(image)
    ch, cw = dct_matrix(x.shape[0]), dct_matrix(x.shape[1])
    return Spectrum(np.einsum("ki,ijc,lj->klc", ch, x, cw, optimize=True))


def idct2(spec) -> np.ndarray:
    s = _coeffs(spec)
    ch, cw = dct_matrix(s.shape[0]), dct_matrix(s.shape[1])
    return np.einsum("ki,klc,lj->ijc", ch, s, cw, optimize=True)


def _snap(v: float) -> float:
    r = round(v)
    return float(r) if abs(v - r) < 1e-12 else v


def rotate_spectrum(spec, beta: float) -> Spectrum:
    """Rotate every channel by ``beta`` radians about the grid centre.

    Each output cell pulls its value from the inversely rotated source
    position by bilinear interpolation; neighbours outside the grid read 0.
    """
    if abs(beta) > math.pi + 1e-12:
        raise ValueError(f"rotation angle {beta} outside [-pi, pi]")
    s = _coeffs(spec)
    h, w, c = s.shape
    if beta == 0:
        return Spectrum(s.copy())
    cos_b, sin_b = _snap(math.cos(beta)), _snap(math.sin(beta))
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    dy, dx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy -= cy
    dx -= cx
    sy = cy + cos_b * dy + sin_b * dx
    sx = cx - sin_b * dy + cos_b * dx

    y0, x0 = np.floor(sy), np.floor(sx)
    fy, fx = (sy - y0)[..., None], (sx - x0)[..., None]
    y0, x0 = y0.astype(np.int64), x0.astype(np.int64)

    def tap(yy, xx):
        ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        vals = s[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
        return np.where(ok[..., None], vals, 0.0)

    out = ((1 - fy) * (1 - fx) * tap(y0, x0) + (1 - fy) * fx * tap(y0, x0 + 1)
           + fy * (1 - fx) * tap(y0 + 1, x0) + fy * fx * tap(y0 + 1, x0 + 1))
    return Spectrum(out)


def self_mix(image, mu: float, beta: float) -> np.ndarray:
    """``idct2(S + mu * rotate(S, beta))`` with ``S = dct2(image)``; not clipped."""
    if not 0.0 <= mu <= 1.0:
        raise ValueError(f"mixing strength {mu} outside [0, 1]")
    if mu == 0:
        # exact identity rather than a DCT round trip
        return _pixels(image).copy()
    s = dct2(image)
    return idct2(s + mu * rotate_spectrum(s, beta))


def corner_slices(shape, tau: int) -> tuple:
    h, w = shape[:2]
    return slice(h - tau, h), slice(w - tau, w)


def perturb_corner(spec, tau: int, sigma: float | None, rng: RandomStream) -> Spectrum:
    """Add Gaussian noise to the bottom-right ``tau x tau`` block of every channel.

    ``sigma=None`` uses a tenth of the mean absolute coefficient inside that
    block. Coefficients outside the block are copied untouched.
    """
    s = _coeffs(spec).copy()
    h, w, c = s.shape
    if not 1 <= tau <= min(h, w):
        raise ValueError(f"tau={tau} outside [1, {min(h, w)}]")
    rows, cols = corner_slices(s.shape, tau)
    if sigma is None:
        sigma = 0.1 * float(np.abs(s[rows, cols]).mean())
    s[rows, cols] += rng.normal(0.0, sigma, (tau, tau, c))
    return Spectrum(s)


def hf_corner_noise(image, tau: int, sigma: float | None, rng: RandomStream) -> np.ndarray:
    x = _pixels(image)
    if not 1 <= tau <= min(x.shape[:2]):
        raise ValueError(f"tau={tau} outside [1, {min(x.shape[:2])}]")
    return idct2(perturb_corner(dct2(x), tau, sigma, rng))


def band_pass(image, tau: int, band: str) -> np.ndarray:
    """Reconstruct from the low band ``[0, tau)^2`` or from everything outside it."""
    x = _pixels(image)
    if not 0 <= tau <= max(x.shape[:2]):
        raise ValueError(f"tau={tau} outside the spectrum")
    s = dct2(x).coeffs
    keep = np.zeros(x.shape[:2], dtype=bool)
    keep[:tau, :tau] = True
    if band == "high":
        keep = ~keep
    elif band != "low":
        raise ValueError(f"band must be 'low' or 'high', got {band!r}")
    return idct2(s * keep[..., None])
