"""Sum-separable control-contraction metrics for networks of input-affine systems."""

__version__ = "0.1.0"
