"""Cross-modal representation alignment on weakly aligned multimodal data."""

__version__ = "0.1.0"
