"""Region-based active learning for semantic segmentation with equivariant
uncertainty and a self-consistency loss, in pure NumPy."""

__version__ = "0.1.0"
