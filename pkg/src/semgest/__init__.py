"""Desk-scale co-speech gesture pipeline.

Tokenizes skeletal motion with a body-part-aware residual vector quantizer,
generates rhythm-conditioned token sequences from audio features, retrieves
semantic gestures from an indexed library, merges them at beat-aligned
timings, and evaluates the results.
"""

__version__ = "0.1.0"
