"""Cross-modal memory-bank anomaly detection over file-based feature maps."""

__version__ = "0.1.0"
