"""Probability-distribution representation detector for hyperspectral anomaly detection."""

__version__ = "0.1.0"

from .detector import PRESETS, DetectionMap, PdrdConfig, grx_detect, lrx_detect, normalize_map, pdrd_detect
from .evaluation import auc_pf_tau, latent_correlation, roc_curve, summary
from .hsi_io import GroundTruth, HsiCube, SceneSpec, default_scene_spec, load_cube, save_cube, synth_scene
from .vae import TrainConfig, VaeModel, train

__all__ = [
    "__version__",
    "PRESETS",
    "DetectionMap",
    "PdrdConfig",
    "grx_detect",
    "lrx_detect",
    "normalize_map",
    "pdrd_detect",
    "auc_pf_tau",
    "latent_correlation",
    "roc_curve",
    "summary",
    "GroundTruth",
    "HsiCube",
    "SceneSpec",
    "default_scene_spec",
    "load_cube",
    "save_cube",
    "synth_scene",
    "TrainConfig",
    "VaeModel",
    "train",
]
