"""Learned raw-image preprocessing trained jointly with a toy detector.

Subpackages cover a numpy reverse-mode autodiff engine, Bayer-domain raw
handling, parallel and sequential learned preprocessing modules, a grid
detector with COCO-style evaluation, a synthetic raw scene generator with
noise and weather corruptions, and training plus analysis harnesses.
"""

__version__ = "0.1.0"
