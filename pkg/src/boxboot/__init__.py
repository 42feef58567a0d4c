"""Box-supervised segmentation with learned label uncertainty and online bootstrapping."""

__version__ = "0.1.0"
