"""Leakage-free window sampling and a small fully convolutional classifier
for hyperspectral scenes, built on numpy."""

__version__ = "0.1.0"
