"""Few-shot portrait radiance fields with a meta-learned initialization."""

__version__ = "0.1.0"
