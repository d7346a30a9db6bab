"""Factorized Bayesian parameter generation for zero-shot task-language transfer.

The parameter space of a token classifier is modeled with one Gaussian
latent vector per task and per language; tied feed-forward networks map a
latent pair to a distribution over classifier-head parameters. Training is
stochastic variational inference over the seen cells of the task-language
grid, and unseen cells are predicted zero-shot, with calibrated uncertainty
through posterior model averaging and predictive entropy.
"""

__version__ = "0.1.0"
