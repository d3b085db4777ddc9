"""Land-cover classification from sparse single-pixel annotations.

Pixel-based random forest and center-pixel CNN classifiers over
multi-channel rasters, with pretraining, transfer, semi-supervised
distillation, test-time augmentation and full-raster map production.
"""

__version__ = "0.1.0"
