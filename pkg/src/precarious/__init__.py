"""Adversarial-imposter training pipeline for detectors on rare pedestrian scenes."""

__version__ = "0.1.0"
