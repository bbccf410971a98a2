"""Finite-horizon stochastic impulse control: QVI solver, policy extraction and Monte Carlo checks."""

__version__ = "0.1.0"
