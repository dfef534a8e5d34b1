"""Hybrid-supervised mass segmentation toolkit.

Trains a dual-decoder U-Net from a small set of pixel-wise masks plus a large
set of bounding boxes: a background decoder learns definite-background regions
from reversed box masks, and its reversed prediction gates the features feeding
the segmentation decoder.
"""

__version__ = "0.1.0"
