"""Ownership watermarking for self-supervised image encoders.

A hash-derived pixel patch is embedded into an encoder during pre-training so
that any downstream classifier built on it maps stamped inputs to a narrow set
of labels; ownership is then verified from predicted labels alone.
"""
from .errors import *  # noqa: F401,F403
from .wm_core import Sample, WatermarkPattern, cosine_similarity, generate_pattern, stamp, stamp_images

__version__ = "0.1.0"
