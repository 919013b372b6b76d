"""Posterior backends: exact conjugate inference and Gaussian ensembles."""
from .conjugate import (ConjugatePosterior, ConjugatePrior, conjugate_update, fit_conjugate, mean_mdp,
                        prior, sample_posterior_mdp, sample_posterior_mdps)

__all__ = ["ConjugatePosterior", "ConjugatePrior", "conjugate_update", "fit_conjugate", "mean_mdp",
           "prior", "sample_posterior_mdp", "sample_posterior_mdps"]
