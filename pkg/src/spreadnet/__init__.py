"""Ensemble-spread prediction with a self-contained numpy autodiff engine and 3D U-Net."""
from .grids import EnsembleSample, Field, GridSpec, NormStats, ensemble_mean, ensemble_spread

__all__ = ["EnsembleSample", "Field", "GridSpec", "NormStats", "ensemble_mean", "ensemble_spread"]
__version__ = "0.1.0"
