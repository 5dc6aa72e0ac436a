"""ROC analysis and the latent-dimension correlation diagnostic."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .detector import DetectionMap, normalize_map
from .hsi_io import GroundTruth
from .vae import LatentField

__all__ = [
    "RocCurve",
    "CorrelationDiag",
    "roc_curve",
    "auc_pd_pf",
    "auc_pf_tau",
    "latent_correlation",
    "write_roc_csv",
    "summary",
    "TAU_NOTE",
]

TAU_NOTE = "tau spans [0, 1] over the min-max normalized detection map"


@dataclass(frozen=True)
class RocCurve:
    """Points ordered by descending threshold; the first threshold is +inf."""

    tau: np.ndarray
    pf: np.ndarray
    pd: np.ndarray
    auc_pd_pf: float


@dataclass(frozen=True)
class CorrelationDiag:
    corr: np.ndarray
    mean_abs_offdiag: float
    degenerate: Tuple[int, ...] = ()


def _split(dmap: DetectionMap, gt: GroundTruth) -> Tuple[np.ndarray, np.ndarray]:
    if dmap.scores.shape != gt.mask.shape:
        raise ValueError(f"map shape {dmap.scores.shape} does not match ground truth {gt.mask.shape}")
    scores = dmap.scores.ravel()
    labels = gt.mask.ravel()
    if labels.all() or not labels.any():
        raise ValueError("ground truth needs at least one anomaly and one background pixel")
    return scores, labels


def _trapezoid(x: np.ndarray, y: np.ndarray) -> float:
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1])) * 0.5)


def roc_curve(dmap: DetectionMap, gt: GroundTruth) -> RocCurve:
    """Exact ROC: one point per distinct score (ties share a threshold), plus the (0, 0) start."""
    scores, labels = _split(dmap, gt)
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    last_of_group = np.r_[np.flatnonzero(s[1:] != s[:-1]), s.size - 1]
    tau = np.r_[np.inf, s[last_of_group]]
    pd = np.r_[0, tp[last_of_group]] / tp[-1]
    pf = np.r_[0, fp[last_of_group]] / fp[-1]
    return RocCurve(tau=tau, pf=pf, pd=pd, auc_pd_pf=_trapezoid(pf, pd))


def auc_pd_pf(roc: RocCurve) -> float:
    """Trapezoidal area under detection probability vs false-alarm rate."""
    return _trapezoid(roc.pf, roc.pd)


def auc_pf_tau(dmap: DetectionMap, gt: GroundTruth) -> float:
    """Area under the false-alarm rate as a function of the normalized threshold.

    pf(tau) is a staircase in tau; integrating it with both corners of every
    step makes the trapezoid rule exact, so the result equals the mean
    normalized background score.
    """
    if not dmap.normalized:
        raise ValueError("auc_pf_tau needs a normalized map (see normalize_map)")
    scores, labels = _split(dmap, gt)
    bg = np.sort(scores[~labels])
    levels, first = np.unique(bg, return_index=True)
    survival = (bg.size - first) / bg.size  # fraction of background >= each level
    widths = np.diff(np.r_[0.0, levels])
    return float(np.sum(widths * survival))


def latent_correlation(field: LatentField) -> CorrelationDiag:
    """Pearson correlation between latent-mean dimensions across all pixels.

    Dimensions with zero variance are listed in ``degenerate`` and their rows
    and columns are zero.
    """
    mu = field.mu.reshape(-1, field.k)
    if mu.shape[0] < 2:
        raise ValueError("need at least two pixels")
    k = mu.shape[1]
    centred = mu - mu.mean(axis=0)
    std = np.sqrt(np.mean(centred**2, axis=0))
    scale = np.maximum(1.0, np.abs(mu).max(axis=0))
    live = std > 1e-12 * scale
    corr = np.zeros((k, k))
    if live.any():
        z = centred[:, live] / std[live]
        c = z.T @ z / mu.shape[0]
        c = np.clip(0.5 * (c + c.T), -1.0, 1.0)
        np.fill_diagonal(c, 1.0)
        corr[np.ix_(live, live)] = c
    off = ~np.eye(k, dtype=bool)
    mean_abs = float(np.abs(corr[off]).mean()) if k > 1 else 0.0
    return CorrelationDiag(corr, mean_abs, tuple(int(i) for i in np.flatnonzero(~live)))


def write_roc_csv(roc: RocCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tau", "pf", "pd"])
        for t, f, d in zip(roc.tau, roc.pf, roc.pd):
            writer.writerow([repr(float(t)), repr(float(f)), repr(float(d))])


def summary(dmap: DetectionMap, gt: GroundTruth) -> dict:
    """AUC summary for a raw (unnormalized) or normalized map."""
    roc = roc_curve(dmap, gt)
    norm = dmap if dmap.normalized else normalize_map(dmap)
    return {
        "auc_pd_pf": roc.auc_pd_pf,
        "auc_pf_tau": auc_pf_tau(norm, gt),
        "n_anomaly": gt.n_anomaly,
        "n_background": gt.n_background,
        "tau_normalization": TAU_NOTE,
        "degenerate_map": bool(norm.degenerate),
    }

