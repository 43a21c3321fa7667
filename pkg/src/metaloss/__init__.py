"""Meta-learned loss functions for online inverse dynamics adaptation."""

__version__ = "0.1.0"
