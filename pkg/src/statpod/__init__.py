"""Statistical POD reduction, Riccati feedback and tensor-train surrogates for
quadratic-bilinear control systems."""

from .exceptions import StatPodError

__version__ = "0.1.0"

__all__ = ["StatPodError", "__version__"]
