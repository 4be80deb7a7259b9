"""Discounted objective evaluation and endpoint diagnostics."""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .models import current_value


@dataclass
class PathDiagnostics:
    J: float
    dev_inf: float
    dev_2: float
    t: np.ndarray          # rescaled mesh
    jca: np.ndarray        # J_ca along the path
    jca_discounted: np.ndarray
    dev_t: np.ndarray      # sup deviation from the target along the path
    J0: float | None = None
    J1: float | None = None


def css_value(model, fem, u_hat, params):
    """Value of a steady state: J_ca / rho."""
    rho = params.rho
    if rho <= 0:
        raise InvalidArgumentError("steady value needs rho > 0")
    return current_value(model, fem, u_hat, params) / rho


def path_value(model, fem, path, params=None):
    """Discounted value of a canonical path by trapezoidal quadrature of
    T e^{-rho T t} J_ca(u(t)) over the rescaled mesh t in [0, 1]."""
    if params is None:
        params = path.params
    rho = params.rho
    t = path.t_mesh
    T = path.T
    jca = np.empty(t.size)
    for j in range(t.size):
        jca[j] = current_value(model, fem, path.u[j], params)
        if not np.isfinite(jca[j]):
            raise InvalidArgumentError(
                f"non-finite current value at mesh point {j} (t={t[j]:.4f})"
            )
    return float(T * np.trapezoid(np.exp(-rho * T * t) * jca, t))


def deviation(path, target_point, n_u=None):
    """(sup, weighted-L2) norms of the endpoint deviation u(1) - u_hat."""
    d = np.asarray(path.u[-1]) - np.asarray(target_point)
    if n_u is None:
        n_u = d.size
    dev_inf = float(np.max(np.abs(d)))
    dev_2 = float(np.sqrt(np.sum(d * d) / n_u))
    return dev_inf, dev_2


def path_diagnostics(model, fem, path, target_point, params=None,
                     J0=None, J1=None):
    """Per-time diagnostics for convergence plots: deviation decay, current
    value, and discounted current value along the path."""
    if params is None:
        params = path.params
    rho = params.rho
    t = path.t_mesh
    jca = np.array([current_value(model, fem, path.u[j], params)
                    for j in range(t.size)])
    disc = np.exp(-rho * path.T * t) * jca
    dev_t = np.max(np.abs(path.u - np.asarray(target_point)[None, :]), axis=1)
    dev_inf, dev_2 = deviation(path, target_point)
    return PathDiagnostics(
        J=path_value(model, fem, path, params),
        dev_inf=dev_inf,
        dev_2=dev_2,
        t=t.copy(),
        jca=jca,
        jca_discounted=disc,
        dev_t=dev_t,
        J0=J0,
        J1=J1,
    )
