"""Over-the-air federated edge learning simulator with gradient/channel aware scheduling."""

__version__ = "0.1.0"
