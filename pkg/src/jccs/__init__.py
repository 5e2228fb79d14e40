"""Learning-based surrogate for joint chance-constrained optimal power flow."""

__version__ = "0.1.0"
