"""Neural likelihood approximation for integer-valued time series.

Trains a context-conditioned causal CNN whose outputs parameterise
discretised mixtures of logistic conditionals, runs sequential neural
likelihood with a NUTS kernel, and validates against particle-marginal
Metropolis-Hastings on stochastic epidemic and ecological models.
"""

__version__ = "0.1.0"
