"""Source-free domain adaptation through a Gaussian-mixture virtual domain."""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
