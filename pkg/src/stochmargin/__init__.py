"""Dynamic voltage-stability margin of power systems under stochastic load and
renewable variation, estimated by Monte Carlo time-domain simulation."""
__version__ = "0.1.0"
