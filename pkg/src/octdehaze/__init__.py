"""Unpaired single-image dehazing with octave-convolution backbones and
cyclic depth-consistency supervision."""

__version__ = "0.1.0"
