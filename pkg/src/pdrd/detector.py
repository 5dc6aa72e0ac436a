"""End-to-end PDRD scoring plus the global and dual-window RX baselines."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
from scipy import linalg

from .hsi_io import HsiCube, flatten, normalize_bands, read_flat_array, write_flat_array, write_pgm
from .spatial import NeighborhoodSpec, expectation_field, window_radius
from .vae import LatentField, TrainConfig, TrainReport, VaeModel, latent_field, train
from .wasserstein import w2_modified_batch

__all__ = [
    "PRESETS",
    "PdrdConfig",
    "DetectionMap",
    "pdrd_detect",
    "score_field",
    "grx_detect",
    "lrx_detect",
    "normalize_map",
    "save_map",
    "load_map",
    "save_heatmap",
    "rx_regularization",
]


@dataclass(frozen=True)
class PdrdConfig:
    beta: float = 10.0
    k: int = 20
    epsilon: int = 5
    gamma: float = 0.0
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 100
    patience: int = 20
    seed: int = 0
    include_center: bool = True
    epsilon_convention: str = "radius"
    normalize: bool = True

    def __post_init__(self):
        if self.beta < 1:
            raise ValueError("beta must be >= 1")
        if self.k < 1 or self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("k, epochs, batch_size and patience must be >= 1")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        window_radius(self.epsilon, self.epsilon_convention)

    def neighborhood(self) -> NeighborhoodSpec:
        return NeighborhoodSpec(window_radius(self.epsilon, self.epsilon_convention), self.include_center)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            k=self.k,
            beta=self.beta,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            patience=self.patience,
            seed=self.seed,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def updated(self, **changes) -> "PdrdConfig":
        return replace(self, **changes)


# Per-dataset optima reported for the four benchmark scenes.
PRESETS: Dict[str, dict] = {
    "sandiego": dict(beta=10.0, k=20, epsilon=21, gamma=0.0, learning_rate=1e-3, batch_size=16),
    "pavia": dict(beta=50.0, k=30, epsilon=9, gamma=0.0, learning_rate=1e-3, batch_size=32),
    "gulfport": dict(beta=500.0, k=50, epsilon=25, gamma=0.0, learning_rate=1e-3, batch_size=16),
    "jasperridge": dict(beta=50.0, k=40, epsilon=31, gamma=0.0, learning_rate=1e-5, batch_size=32),
}

# Dual-window RX (outer, inner) side lengths for the same scenes.
LRX_PRESETS: Dict[str, Tuple[int, int]] = {
    "sandiego": (19, 17),
    "pavia": (25, 19),
    "gulfport": (27, 25),
    "jasperridge": (25, 23),
}


@dataclass(frozen=True)
class DetectionMap:
    """H x W anomaly scores.

    ``degenerate`` marks a normalized map whose input was constant;
    ``flagged`` lists (row, col) pixels scored with fallback statistics.
    """

    scores: np.ndarray
    normalized: bool = False
    degenerate: bool = False
    flagged: Tuple[Tuple[int, int], ...] = field(default=(), repr=False)

    def __post_init__(self):
        s = np.array(self.scores, dtype=np.float64, copy=True)
        if s.ndim != 2:
            raise ValueError(f"scores must be 2-D, got shape {s.shape}")
        if not np.all(np.isfinite(s)):
            r, c = np.argwhere(~np.isfinite(s))[0]
            raise ValueError(f"non-finite score at pixel ({r}, {c})")
        if np.any(s < 0):
            raise ValueError("scores must be >= 0")
        if self.normalized:
            if s.max() > 1.0:
                raise ValueError("normalized scores must lie in [0, 1]")
            if s.max() != 1.0 and s.max() != 0.0:
                raise ValueError("a normalized map must have max 1 (or be all zero)")
        s.setflags(write=False)
        object.__setattr__(self, "scores", s)

    @property
    def height(self) -> int:
        return self.scores.shape[0]

    @property
    def width(self) -> int:
        return self.scores.shape[1]


def normalize_map(dmap: DetectionMap) -> DetectionMap:
    """Min-max scale to [0, 1]; a constant map becomes all zeros with ``degenerate=True``."""
    s = dmap.scores
    lo, hi = s.min(), s.max()
    if hi == lo:
        return DetectionMap(np.zeros_like(s), normalized=True, degenerate=True, flagged=dmap.flagged)
    out = (s - lo) / (hi - lo)
    # guard against 1 - ulp at the maximum
    out[s == hi] = 1.0
    return DetectionMap(np.clip(out, 0.0, 1.0), normalized=True, flagged=dmap.flagged)


# --------------------------------------------------------------------------
# PDRD
# --------------------------------------------------------------------------


def score_field(field: LatentField, config: PdrdConfig) -> DetectionMap:
    """Score every pixel against its neighborhood's average latent Gaussian."""
    expect = expectation_field(field, config.neighborhood())
    scores = w2_modified_batch(field.mu, field.sigma, expect.mu_bar, expect.sigma_bar, config.gamma)
    if not np.all(np.isfinite(scores)):
        r, c = np.argwhere(~np.isfinite(scores))[0]
        raise FloatingPointError(f"non-finite anomaly score at pixel ({r}, {c})")
    return DetectionMap(scores)


def pdrd_detect(
    cube: HsiCube,
    config: PdrdConfig,
    *,
    log=None,
    timings: Optional[Dict[str, float]] = None,
) -> Tuple[DetectionMap, VaeModel, TrainReport]:
    """Train on every pixel of ``cube``, then score each pixel's latent distribution.

    Stage wall-clock times (seconds) are written into ``timings`` when given.
    """
    timings = timings if timings is not None else {}
    t0 = time.perf_counter()
    work = normalize_bands(cube) if config.normalize else cube
    samples, _ = flatten(work)
    timings["prepare"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    model, report = train(samples, config.train_config(), log=log)
    timings["train"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    lf = latent_field(model, work)
    timings["encode"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    dmap = score_field(lf, config)
    timings["score"] = time.perf_counter() - t0
    return dmap, model, report


# --------------------------------------------------------------------------
# RX baselines
# --------------------------------------------------------------------------


def rx_regularization(cov: np.ndarray, scale: float = 0.0) -> float:
    """Ridge added to RX covariances: 1e-6 times the mean band variance.

    The ridge never drops below ``(1e-10 * scale)**2`` where ``scale`` is the
    largest absolute data value, so a covariance made only of rounding noise
    (a constant image) does not amplify that noise into large scores.
    """
    return max(1e-6 * float(np.trace(cov)) / cov.shape[0], (1e-10 * scale) ** 2)


def grx_detect(cube: HsiCube) -> DetectionMap:
    """Global RX: squared Mahalanobis distance to the image mean."""
    x, _ = flatten(cube)
    x = x.astype(np.float64)
    n, b = x.shape
    if n <= b:
        raise ValueError(f"global RX needs more pixels ({n}) than bands ({b})")
    mean = x.mean(axis=0)
    d = x - mean
    cov = d.T @ d / (n - 1)
    cov[np.diag_indices(b)] += rx_regularization(cov, float(np.abs(x).max()))
    try:
        factor = linalg.cho_factor(cov, lower=True)
    except linalg.LinAlgError as exc:
        raise linalg.LinAlgError(f"background covariance is singular after regularization: {exc}")
    scores = np.einsum("ij,ij->i", d, linalg.cho_solve(factor, d.T).T)
    return DetectionMap(np.maximum(scores, 0.0).reshape(cube.height, cube.width))


def lrx_detect(cube: HsiCube, w_out: int, w_in: int) -> DetectionMap:
    """Dual-window RX with background statistics from the annulus between two square windows.

    ``w_out`` and ``w_in`` are odd side lengths. Pixels whose clipped annulus
    has fewer samples than bands (so the covariance is rank deficient and
    only the ridge keeps it invertible) are listed in ``flagged``.
    """
    if w_out % 2 == 0 or w_in % 2 == 0 or not (w_out > w_in >= 1):
        raise ValueError("window sizes must be odd with w_out > w_in >= 1")
    ro, ri = (w_out - 1) // 2, (w_in - 1) // 2
    b, h, w = cube.data.shape
    grid = np.moveaxis(cube.data.astype(np.float64), 0, -1)
    scores = np.empty((h, w))
    flagged = []
    for r in range(h):
        r0, r1 = max(0, r - ro), min(h, r + ro + 1)
        for c in range(w):
            c0, c1 = max(0, c - ro), min(w, c + ro + 1)
            keep = np.ones((r1 - r0, c1 - c0), dtype=bool)
            keep[max(0, r - ri) - r0 : min(h, r + ri + 1) - r0, max(0, c - ri) - c0 : min(w, c + ri + 1) - c0] = False
            ring = grid[r0:r1, c0:c1][keep]
            if ring.shape[0] == 0:
                raise ValueError(f"empty annulus at pixel ({r}, {c})")
            mean = ring.mean(axis=0)
            centred = ring - mean
            cov = centred.T @ centred / ring.shape[0]
            scale = max(float(np.abs(ring).max()), float(np.abs(grid[r, c]).max()))
            lam = rx_regularization(cov)
            if ring.shape[0] < b or lam <= (1e-10 * scale) ** 2:
                flagged.append((r, c))
            cov[np.diag_indices(b)] += max(rx_regularization(cov, scale), 1e-300)
            d = grid[r, c] - mean
            scores[r, c] = max(float(d @ np.linalg.solve(cov, d)), 0.0)
    return DetectionMap(scores, flagged=tuple(flagged))


# --------------------------------------------------------------------------
# Map files
# --------------------------------------------------------------------------


def save_map(dmap: DetectionMap, path) -> None:
    """Flat-binary grid (the cube format with one band), float32 scores."""
    write_flat_array(dmap.scores[None, :, :], Path(path))


def load_map(path, normalized: bool = False) -> DetectionMap:
    data = read_flat_array(Path(path))
    if data.shape[0] != 1:
        raise ValueError(f"{path}: a detection map must have exactly one band, found {data.shape[0]}")
    return DetectionMap(data[0].astype(np.float64), normalized=normalized)


def heatmap_bytes(dmap: DetectionMap) -> np.ndarray:
    norm = dmap if dmap.normalized else normalize_map(dmap)
    return np.round(norm.scores * 255.0).astype(np.uint8)


def save_heatmap(dmap: DetectionMap, path) -> None:
    """8-bit heatmap of the normalized map; ``.png`` writes PNG (needs Pillow), otherwise PGM."""
    img = heatmap_bytes(dmap)
    if str(path).lower().endswith(".png"):
        from PIL import Image

        Image.fromarray(img, mode="L").save(path)
    else:
        write_pgm(path, img)
