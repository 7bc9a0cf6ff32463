"""samlab: shallow channel-attention transformer + SAM forecasting lab."""

__version__ = "0.1.0"
