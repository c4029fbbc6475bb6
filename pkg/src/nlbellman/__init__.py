"""Dirichlet problems for nonlocal Bellman equations of order below one."""

__version__ = "0.1.0"
