"""Dynamic SSD-GAN: proposal, size routing, x2 super-resolution and classification."""

__version__ = "0.1.0"
