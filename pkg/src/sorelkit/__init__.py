"""Bayesian offline RL workbench: posteriors, information loss, regret, SOReL and TOReL."""

__version__ = "0.1.0"
