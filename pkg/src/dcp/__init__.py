"""Few-shot segmentation with divide-and-conquer proxies."""

__version__ = "0.1.0"
