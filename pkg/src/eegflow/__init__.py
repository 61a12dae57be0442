"""EEG optical-flow videos and a small domain-adversarial transfer pipeline."""

from .errors import EegFlowError, NumericalError, ValidationError

__version__ = "0.1.0"

__all__ = ["EegFlowError", "NumericalError", "ValidationError", "__version__"]
