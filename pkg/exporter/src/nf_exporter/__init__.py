"""One-directional converter: PyTorch checkpoints to the toolkit model format."""

from .blocks import Residual
from .convert import ExportError, ExportManifest, export

__version__ = "0.1.0"

__all__ = ["ExportError", "ExportManifest", "Residual", "export"]
