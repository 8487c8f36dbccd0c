"""Feature-space dataset watermarking and ownership verification."""

__version__ = "0.1.0"
