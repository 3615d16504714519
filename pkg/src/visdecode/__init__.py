"""Synthetic-world whole-brain visual decoding pipeline."""

from .pipeline import DecodingPipeline, ExperimentConfig, Run

__all__ = ["DecodingPipeline", "ExperimentConfig", "Run"]
__version__ = "0.1.0"
