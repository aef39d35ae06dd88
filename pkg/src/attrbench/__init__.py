"""attrbench: attribute-editing benchmark builder for segmentation robustness."""

__version__ = "0.1.0"
