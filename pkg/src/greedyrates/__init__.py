"""Greedy-policy regret rates for continuous-action stochastic control."""

__version__ = "0.1.0"
