"""Topology-aware knowledge distillation for point-cloud segmentation networks."""

__version__ = "0.1.0"
