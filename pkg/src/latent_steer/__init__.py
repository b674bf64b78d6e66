"""Steering frozen-model attention-head features for video anomaly scoring."""

__version__ = "0.1.0"
