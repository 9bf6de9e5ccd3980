"""Monte Carlo laboratory for multiple imputation under extreme-value contamination."""

__version__ = "0.1.0"
