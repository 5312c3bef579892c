"""Sample-wise stateful LSTM for sporadic activity recognition."""

__version__ = "0.1.0"
