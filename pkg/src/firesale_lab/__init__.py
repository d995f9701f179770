"""Fire-sale regulation laboratory: equilibrium, Bayesian policy, and a holdings graph model."""

__version__ = "0.1.0"
