"""Shared independent oracles and tiny synthetic models for the test suite."""

import numpy as np
from scipy.optimize import brentq

from occ.models import CanonicalModel


class LinearSaddle(CanonicalModel):
    """Decoupled linear canonical pair: v' = -v, lambda' = +lambda (ODE).

    The origin is a perfect saddle with Psi = e2^T; the exact path from
    v(0) = v0 is v(t) = v0 exp(-T t), lambda = 0.
    """

    name = "linear-saddle"
    nstates = 1
    param_names = ("rho", "rate")
    param_defaults = (1.0, 1.0)
    diffusion_coeffs = (0.0,)
    is_pde = False

    def f(self, F, p):
        r = p["rate"]
        return np.array([-r * F[0], r * F[1]])

    def f_jac(self, F, p):
        r = p["rate"]
        n = F.shape[1]
        J = np.zeros((2, 2, n))
        J[0, 0] = -r * np.ones(n)
        J[1, 1] = r * np.ones(n)
        return J

    def control(self, F, p):
        return np.empty(0)

    def j_c(self, F, p):
        return np.zeros(F.shape[1])


def sloc_scalar_roots(p):
    """All flat steady roots of the shallow-lake canonical system, found by
    grid scan + bisection on the reduced scalar equation in v."""
    b, gam, rho = p["b"], p["gamma"], p["rho"]

    def g(v):
        kap = b * v - v * v / (1 + v * v)
        return 2 * gam * v * kap - (rho + b - 2 * v / (1 + v * v) ** 2)

    grid = np.linspace(1e-3, 6.0, 2000)
    vals = np.array([g(v) for v in grid])
    roots = []
    for a, bb, fa, fb in zip(grid[:-1], grid[1:], vals[:-1], vals[1:]):
        if fa * fb < 0:
            roots.append(brentq(g, a, bb, xtol=1e-14))
    return roots
