"""Vertebral level classification from fused force and ultrasound scans.

The package simulates robotic back sweeps, conditions the recorded force and
ultrasound-probability signals, segments them with a multi-stage dilated
convolutional network written in plain numpy, and scores the result per
vertebral level.
"""

from spinefuse.labels import CLASS_NAMES, LevelSegmentation

__version__ = "0.1.0"

__all__ = ["CLASS_NAMES", "LevelSegmentation", "__version__"]
