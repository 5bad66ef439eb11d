"""Neural dynamical model structures fitted by prediction- and simulation-error minimization."""

__version__ = "0.1.0"
