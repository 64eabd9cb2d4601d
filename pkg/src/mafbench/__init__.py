"""Multimodal forgery-detection benchmark on a synthetic world with ground-truth latents."""

__version__ = "0.1.0"
