"""Desk-scale lab for causal-origin state representations in non-stationary RL."""

__version__ = "0.1.0"
