"""Session-wise multi-task CTR/CTCVR prediction with actor-critic loss weighting."""

__version__ = "0.1.0"
