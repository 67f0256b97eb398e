"""Graph signal processing and graph neural network toolkit."""

__version__ = "0.1.0"
