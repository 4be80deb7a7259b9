"""Optimal-control continuation toolkit for 1D PDE/ODE canonical systems.

Workflow: discretize (fem1d), pick a model (models), continue canonical
steady states and detect bifurcations (steady), branch-switch to periodic
states and compute Floquet data (periodic, pschur), then connect prescribed
initial states to a saddle target by homotopy continuation of a truncated
boundary value problem (cpath), evaluate discounted objectives (value),
and locate indifference points between competing targets (skiba).
"""

__version__ = "0.1.0"

from . import errors, fem1d, models, steady, pschur, periodic, cpath, value, skiba

__all__ = [
    "errors",
    "fem1d",
    "models",
    "steady",
    "pschur",
    "periodic",
    "cpath",
    "value",
    "skiba",
]
