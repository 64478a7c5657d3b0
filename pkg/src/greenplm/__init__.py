"""Text-first 3D point-cloud language model at desk scale."""

__version__ = "0.1.0"
