"""Learning in block MDPs with exogenous noise via path elimination."""

__version__ = "0.1.0"
