"""Physics-conditioned localized artifact attention for deepfake detection, at desk scale."""

__version__ = "0.1.0"
