"""Spatial probe transforms: block mixing, pixel dropping and their compositions."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from featherstorm.data import DatasetHandle, ImageTensor, RandomStream, sample_donor
from featherstorm.frequency import self_mix


@dataclass(frozen=True)
class BlockGrid:
    n_b: int
    row_bounds: tuple
    col_bounds: tuple

    def blocks(self):
        for i in range(self.n_b):
            for j in range(self.n_b):
                yield i, j, slice(self.row_bounds[i], self.row_bounds[i + 1]), \
                    slice(self.col_bounds[j], self.col_bounds[j + 1])


def _cuts(n: int, n_b: int) -> tuple:
    # round half up, so extents differ by at most one
    return tuple(int(math.floor(i * n / n_b + 0.5)) for i in range(n_b + 1))


def block_grid(h: int, w: int, n_b: int) -> BlockGrid:
    if not 1 <= n_b <= min(h, w):
        raise ValueError(f"n_b={n_b} outside [1, {min(h, w)}] for a {h}x{w} image")
    return BlockGrid(n_b, _cuts(h, n_b), _cuts(w, n_b))


def block_mix(x: ImageTensor, donor: ImageTensor, n_b: int, p: float, rng: RandomStream) -> ImageTensor:
    """Swap each grid block for the donor's co-located block with probability ``1 - p``."""
    if x.shape != donor.shape:
        raise ValueError(f"image shape {x.shape} and donor shape {donor.shape} differ")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"keep probability {p} outside [0, 1]")
    grid = block_grid(x.shape[0], x.shape[1], n_b)
    keep = rng.random((n_b, n_b)) < p
    out = x.pixels.copy()
    for i, j, rows, cols in grid.blocks():
        if not keep[i, j]:
            out[rows, cols] = donor.pixels[rows, cols]
    return x.with_pixels(out)


def pixel_drop(x: ImageTensor, p_d: float, rng: RandomStream) -> ImageTensor:
    """Zero each pixel location (all channels together) with probability ``p_d``."""
    if not 0.0 <= p_d <= 1.0:
        raise ValueError(f"drop probability {p_d} outside [0, 1]")
    drop = rng.random(x.shape[:2]) < p_d
    return x.with_pixels(x.pixels * ~drop[..., None])


def draw_beta(beta_range, rng: RandomStream) -> float:
    lo, hi = beta_range
    return float(rng.uniform(lo, hi))


def safer_probe(x: ImageTensor, data: DatasetHandle, cfg, rng: RandomStream) -> np.ndarray:
    """Block-mix with a donor from another class, then self-mix the result in the DCT domain."""
    donor = sample_donor(data, x.label, rng)
    xb = block_mix(x, donor, cfg.n_b, cfg.keep_p, rng)
    return self_mix(xb, cfg.mix_mu, draw_beta(cfg.beta_range, rng))


def blockmix_probe(x: ImageTensor, data: DatasetHandle, cfg, rng: RandomStream) -> np.ndarray:
    donor = sample_donor(data, x.label, rng)
    return block_mix(x, donor, cfg.n_b, cfg.keep_p, rng).pixels


def selfmix_probe(x: ImageTensor, data: DatasetHandle, cfg, rng: RandomStream) -> np.ndarray:
    return self_mix(x, cfg.mix_mu, draw_beta(cfg.beta_range, rng))
