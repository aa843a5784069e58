"""Next-day fire prediction as semantic segmentation.

Per-day multi-channel rasters are normalized, tiled into 32x32 patches,
sampled and augmented, then a U-Net is trained with class-weighted
cross-entropy under k-fold early stopping on the shybrid metric and
evaluated pixel-wise on an untouched holdout.

This module deliberately imports nothing heavy: the CLI pins BLAS thread
counts before numpy is first loaded, which only works while importing
``fireseg`` itself stays side-effect free.
"""

__version__ = "0.1.0"
