"""Desk-scale CNN engine with probabilistic spatial smoothing.

The package trains small convolutional classifiers with MC dropout, adds
parameter-free smoothing layers (probability squash + normalized blur)
before downsampling, and ships the measurement tools to verify what the
smoothing does: ensemble metrics, calibration and corruption scores,
feature-variance and Fourier probes, and Hessian max-eigenvalue spectra.
"""

from .ensembling import PredictiveDistribution, TemporalBuffer, mc_predict, weighted_ensemble
from .models import Model, ModelSpec, SmoothingSpec, StageSpec, build
from .smoothing import BlurKernel, ProbConfig, blur, prob, smooth, tanh_tau
from .tensor import ConfigError, ShapeError, Tensor

__all__ = [
    "BlurKernel",
    "ConfigError",
    "Model",
    "ModelSpec",
    "PredictiveDistribution",
    "ProbConfig",
    "ShapeError",
    "SmoothingSpec",
    "StageSpec",
    "TemporalBuffer",
    "Tensor",
    "blur",
    "build",
    "mc_predict",
    "prob",
    "smooth",
    "tanh_tau",
    "weighted_ensemble",
]

__version__ = "0.1.0"
