"""Continuous-time counterfactual tumor-growth toolkit."""

__version__ = "0.1.0"
