"""
countbtf - Bayesian tensor factorisation for count time series, with a
Poisson autoregressive baseline and the simulation studies to compare them.
"""

__version__ = "1.0.0"
