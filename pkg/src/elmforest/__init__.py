"""elmforest: branch-train-merge expert forests with Bayesian domain routing."""

__version__ = "0.1.0"
