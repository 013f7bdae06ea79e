"""Weakly-supervised whole-slide classification on self-supervised tile features."""

__version__ = "0.1.0"
