"""Generative lesion augmentation for imbalanced binary image classification."""

from lesionforge.errors import DataError, LesionForgeError, NumericalError

__version__ = "0.1.0"

__all__ = ["DataError", "LesionForgeError", "NumericalError", "__version__"]
