"""Mean-field SPDE numerics: L-derivatives on Wasserstein space, particle
simulation of mild solutions, and Ito-formula residual checks."""

from .hilbert import Spectrum
from .measures import DiscreteMeasure, Ensemble
from .lions import FDParams

__version__ = "0.1.0"

__all__ = ["Spectrum", "DiscreteMeasure", "Ensemble", "FDParams", "__version__"]
