"""Needle-state classification toolkit for a video-instrumented cannulation simulator.

Light convolutional networks and a convolutional-recurrent network classify
each video frame as NoNeedle, Fist, or Infil.  The package covers synthetic
data generation, training, evaluation, and real-time streaming inference.
"""

__version__ = "0.1.0"

CLASS_NAMES = ("NoNeedle", "Fist", "Infil")
NUM_CLASSES = 3
