"""Desk-scale lab for boundary-band poisoning experiments.

Pipeline: synthetic Gaussian mixtures -> small dense classifiers ->
aggregation-loss trigger optimization under an L-inf box -> influence-based
drift bounds -> poisoning sweeps with concentration checks.
"""

__version__ = "0.1.0"
