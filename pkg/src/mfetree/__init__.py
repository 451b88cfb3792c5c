"""Mean-field equilibria of heterogeneous CARA agents on a recombining binomial tree."""
__version__ = "0.1.0"
