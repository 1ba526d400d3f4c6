"""Semi-supervised table detection with a DETR-style detector and region-aligned decoder queries."""

__version__ = "0.1.0"
