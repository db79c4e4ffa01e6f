"""Functional-keypoint tool-use imitation from a single demonstration."""

__version__ = "0.1.0"
