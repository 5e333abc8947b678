"""Readout-error simulation, measurement randomized compiling and quasi-probabilistic correction."""

__version__ = "0.1.0"
