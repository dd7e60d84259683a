"""Zero-temperature spin-boson dynamics with an extended hierarchical equations of motion solver."""

__version__ = "0.1.0"

from .bath import BathSpec, correlation_series, correlation_value, spectral_density
from .decomp import CorrelationFit, FitConfig, fit_correlation
from .heom import AdoState, HeomGenerator, SystemSpec, propagate
from .hierarchy import enumerate_space
from .response import (PropagationConfig, absorption_spectrum, linear_response,
                       relax_to_equilibrium, spectrum_peaks)
from .analysis import extract_rate_kernel, integrated_rate, sweep_phase_boundary

__all__ = [
    "AdoState", "BathSpec", "CorrelationFit", "FitConfig", "HeomGenerator", "PropagationConfig",
    "SystemSpec", "absorption_spectrum", "correlation_series", "correlation_value",
    "enumerate_space", "extract_rate_kernel", "fit_correlation", "integrated_rate",
    "linear_response", "propagate", "relax_to_equilibrium", "spectral_density",
    "spectrum_peaks", "sweep_phase_boundary",
]
