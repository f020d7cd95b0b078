"""robometer: per-input robustness profiling and weak-point detection."""

__version__ = "0.1.0"

from .transforms import WARP_BACKEND  # noqa: F401
