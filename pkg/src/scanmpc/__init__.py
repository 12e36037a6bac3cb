"""Robust nonlinear MPC via associative-scan LQR, ADMM, and SLS tubes."""

__version__ = "0.1.0"
