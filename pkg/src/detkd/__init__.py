"""Desk-scale knowledge distillation laboratory for toy feature-pyramid detectors."""

__version__ = "0.1.0"
