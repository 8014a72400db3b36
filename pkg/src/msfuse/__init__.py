"""Multispectral (color + thermal) pedestrian detection toolkit.

Implements illumination-gated fusion of a two-stream detector: three
illumination estimators, six stream-fusion architectures, two-phase
training, and a miss-rate/FPPI evaluation harness, validated on a seeded
synthetic day/night dataset.
"""

__version__ = "0.1.0"
