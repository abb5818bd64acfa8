"""Mean-field LQ control with Markov regime switching."""

__version__ = "0.1.0"
