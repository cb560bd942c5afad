"""Goal-conditioned supervised RL with sub-goal prediction, in numpy."""

__version__ = "0.1.0"
