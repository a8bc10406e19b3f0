"""Nonparametric VAR: sum-of-trees conditional means with Dirichlet split priors
and factor stochastic volatility."""

__version__ = "0.1.0"
