"""Two-level, language-supervised scene sketch segmentation."""

__all__ = []
