"""Radar localisation on lidar maps: shared place-recognition descriptors and
radar-on-lidar pose tracking, with a synthetic world to exercise both."""

from .core import GridSpec, Pose2D, PoseOffset, Rng, compose, inverse, relative_offset

__version__ = "0.1.0"

__all__ = ["GridSpec", "Pose2D", "PoseOffset", "Rng", "compose", "inverse", "relative_offset"]
