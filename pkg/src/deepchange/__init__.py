"""Unsupervised multiclass change segmentation for bi-temporal 3D point
clouds: alternating feature clustering and pseudo-label training over
point-convolution backbones, followed by weakly supervised mapping of
pseudo-clusters to real change classes."""

__version__ = "0.1.0"
