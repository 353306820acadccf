"""Matrix-state gated RNN: verified kernels, simulated tensor parallelism,
and desk-scale state-tracking experiments."""

from .backend import BACKEND_NAME, HAS_COMPILED

__all__ = ["BACKEND_NAME", "HAS_COMPILED"]
__version__ = "0.1.0"
