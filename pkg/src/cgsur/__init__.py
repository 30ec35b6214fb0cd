"""Probabilistic coarse-grained surrogates for elliptic PDEs.

Library layout:

- field: lognormal conductivity fields and randomized boundary data
- fem: P1 finite elements, adjoints, fluxes, potential energy
- approximators: differentiable parametric maps with reverse-mode gradients
- genmodel: the latent-variable generative model with a coarse solver inside
- vobs: virtual observables (weighted residuals, flux balance, energy)
- inference: stochastic variational training and closed-form updates
- predict: predictive posteriors, metrics, uncertainty propagation
- cli: dataset generation / training / evaluation / UQ driver
"""

__version__ = "0.1.0"
