"""Internal-learning video inpainting: a per-video generator fitted jointly to
frames and optical flow, with the metrics and experiment drivers around it."""

__version__ = "0.1.0"
