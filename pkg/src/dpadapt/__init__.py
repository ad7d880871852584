"""Privacy-preserving unsupervised domain adaptation at desk scale.

A source party trains an encoder/classifier under differential privacy,
shares only the weights plus per-class Gaussian-mixture feature models,
and a target party adapts by resampling features from those mixtures
under adversarial (DANN/CDAN), distillation, and information-maximization
objectives. A membership-inference harness measures the privacy benefit.
"""

__version__ = "0.1.0"

from .backend import active_backend, available_backends, set_backend
from .errors import ConfigError, DpAdaptError, NumericError, ParseError, ShapeError

__all__ = [
    "__version__",
    "active_backend",
    "available_backends",
    "set_backend",
    "DpAdaptError",
    "ShapeError",
    "NumericError",
    "ConfigError",
    "ParseError",
]
