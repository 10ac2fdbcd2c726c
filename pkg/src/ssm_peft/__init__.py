"""State-space model PEFT lab: S4/S6 models, adapters, theory oracles, training harness."""

from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
