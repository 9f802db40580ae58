"""EM-Net: lightweight gaze estimation with global attention and EM feature refinement."""

from .model import EMNet

__all__ = ["EMNet"]
__version__ = "0.1.0"
