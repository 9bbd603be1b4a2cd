"""Adversarial lane-change evaluation workbench.

Trains ensembles of adversarial surrounding-vehicle policies against a
tested lane-change controller with deterministic-policy-gradient RL, then
clusters the resulting risky scenarios (DP-Means over visited-state
densities) to expose distinct failure patterns.
"""

__version__ = "0.1.0"
