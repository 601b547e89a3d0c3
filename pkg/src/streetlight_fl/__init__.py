"""Federated-learning experiment harness for street-light ON/OFF monitoring."""
from .imaging import KERNEL_BACKEND

__version__ = "0.1.0"
__all__ = ["KERNEL_BACKEND", "__version__"]
