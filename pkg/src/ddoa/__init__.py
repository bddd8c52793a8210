"""Multi-speaker DOA estimation with contiguous and dilated phase-map CNNs."""

__version__ = "0.1.0"
