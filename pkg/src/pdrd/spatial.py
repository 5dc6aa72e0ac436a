"""Chebyshev neighborhoods and neighborhood-averaged latent Gaussians."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .vae import LatentField

__all__ = [
    "NeighborhoodSpec",
    "ExpectationField",
    "chebyshev_indices",
    "neighborhood_expectation",
    "expectation_field",
    "window_radius",
]


def window_radius(epsilon: int, convention: str = "radius") -> int:
    """Translate a neighborhood size into a Chebyshev radius.

    ``"radius"`` takes ``epsilon`` as is; ``"window-side"`` reads it as the
    (odd) side length of the square window, so 21 becomes radius 10.
    """
    if convention == "radius":
        return int(epsilon)
    if convention == "window-side":
        if epsilon < 1 or epsilon % 2 == 0:
            raise ValueError(f"window side must be a positive odd integer, got {epsilon}")
        return (int(epsilon) - 1) // 2
    raise ValueError(f"unknown epsilon convention {convention!r}")


@dataclass(frozen=True)
class NeighborhoodSpec:
    epsilon: int
    include_center: bool = True
    boundary: str = "clip"

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.boundary != "clip":
            raise ValueError("only 'clip' boundary handling is supported")


@dataclass(frozen=True)
class ExpectationField:
    """Neighborhood-average mean and variance per pixel, arrays (H, W, k)."""

    mu_bar: np.ndarray
    var_bar: np.ndarray

    def __post_init__(self):
        if self.mu_bar.shape != self.var_bar.shape or self.mu_bar.ndim != 3:
            raise ValueError("mu_bar and var_bar must both be (height, width, k)")
        if not np.all(self.var_bar > 0):
            raise ValueError("var_bar must be strictly positive")

    @property
    def sigma_bar(self) -> np.ndarray:
        return np.sqrt(self.var_bar)


def chebyshev_indices(coord: Tuple[int, int], spec: NeighborhoodSpec, dims: Tuple[int, int]) -> List[Tuple[int, int]]:
    """Grid cells within Chebyshev distance ``spec.epsilon`` of ``coord``, row-major, clipped to ``dims``."""
    r, c = coord
    h, w = dims
    if not (0 <= r < h and 0 <= c < w):
        raise ValueError(f"coordinate {coord} outside a {h}x{w} grid")
    e = spec.epsilon
    out = []
    for i in range(max(0, r - e), min(h, r + e + 1)):
        for j in range(max(0, c - e), min(w, c + e + 1)):
            if not spec.include_center and i == r and j == c:
                continue
            out.append((i, j))
    return out


def neighborhood_expectation(field: LatentField, coord, spec: NeighborhoodSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Mean of mu and mean of sigma^2 over one pixel's neighborhood."""
    idx = chebyshev_indices(coord, spec, (field.height, field.width))
    if not idx:
        raise ValueError(f"empty neighborhood at {coord} (epsilon=0 with the center excluded)")
    rows, cols = np.array(idx).T
    mu = field.mu[rows, cols]
    var = field.sigma[rows, cols] ** 2
    return mu.mean(axis=0), var.mean(axis=0)


def _box_sum(values: np.ndarray, radius: int) -> np.ndarray:
    """Sum of ``values`` (H, W, k) over clipped (2r+1)^2 windows, via running sums."""
    h, w = values.shape[:2]
    # running sum along rows, then columns; windows clipped at borders
    csum = np.zeros((h + 1,) + values.shape[1:])
    np.cumsum(values, axis=0, out=csum[1:])
    top = np.clip(np.arange(h) - radius, 0, h)
    bottom = np.clip(np.arange(h) + radius + 1, 0, h)
    rows = csum[bottom] - csum[top]
    csum = np.zeros((h, w + 1) + values.shape[2:])
    np.cumsum(rows, axis=1, out=csum[:, 1:])
    left = np.clip(np.arange(w) - radius, 0, w)
    right = np.clip(np.arange(w) + radius + 1, 0, w)
    return csum[:, right] - csum[:, left]


def expectation_field(field: LatentField, spec: NeighborhoodSpec) -> ExpectationField:
    """Neighborhood expectation at every pixel using sliding-window sums."""
    h, w = field.height, field.width
    e = spec.epsilon
    rr = np.arange(h)
    cc = np.arange(w)
    count = (
        (np.minimum(rr + e, h - 1) - np.maximum(rr - e, 0) + 1)[:, None]
        * (np.minimum(cc + e, w - 1) - np.maximum(cc - e, 0) + 1)[None, :]
    ).astype(np.float64)
    var = field.sigma**2
    if e == 0 and spec.include_center:
        # singleton neighborhoods; skip the running sums so this is exact
        return ExpectationField(field.mu.copy(), var)
    mu_sum = _box_sum(field.mu, e)
    var_sum = _box_sum(var, e)
    if not spec.include_center:
        mu_sum -= field.mu
        var_sum -= var
        count -= 1
        if np.any(count == 0):
            raise ValueError("empty neighborhood (epsilon=0 with the center excluded)")
    return ExpectationField(mu_sum / count[:, :, None], var_sum / count[:, :, None])
