"""Training-free text-supervised semantic segmentation with LLM-generated subclass descriptors."""

__version__ = "0.1.0"
