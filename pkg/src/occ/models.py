"""Canonical-system models: shallow lake, pollution (PDE and ODE), toy ODE.

A model describes the reaction part f of the canonical system
    du/dt = Dc * Laplacian(u) + f(u, params),   Dc = diag(d, -d),
evaluated nodewise, together with the control map, the local current value
j_c, and named parameters. Field vectors are flat arrays of length 2*N*n
with layout (v_1 nodes, ..., v_N nodes, lambda_1 nodes, ..., lambda_N nodes).
"""

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .errors import DomainError, InvalidArgumentError, NoConvergenceError
from .fem1d import FemOperators


@dataclass(frozen=True)
class ModelParams:
    """Ordered named parameters; rho_index marks the discount rate."""

    names: tuple
    values: np.ndarray
    rho_index: int = 0

    def __getitem__(self, name):
        return float(self.values[self.names.index(name)])

    @property
    def rho(self):
        return float(self.values[self.rho_index])

    def updated(self, **overrides):
        vals = self.values.copy()
        for k, v in overrides.items():
            if k not in self.names:
                raise InvalidArgumentError(f"unknown parameter {k!r}")
            vals[self.names.index(k)] = float(v)
        return replace(self, values=vals)

    def as_dict(self):
        return {k: float(v) for k, v in zip(self.names, self.values)}


def split_fields(u, nstates, n):
    """Flat field vector -> (2N, n) component-by-node array (a view)."""
    u = np.asarray(u)
    if u.size != 2 * nstates * n:
        raise InvalidArgumentError(
            f"field vector has length {u.size}, expected {2 * nstates * n}"
        )
    return u.reshape(2 * nstates, n)


def stack_fields(F):
    """(2N, n) component array -> flat field vector."""
    return np.asarray(F).reshape(-1).copy()


class CanonicalModel:
    """Base class; subclasses provide f, its nodewise Jacobian, kappa, j_c."""

    name = ""
    nstates = 1
    param_names = ()
    param_defaults = ()
    rho_index = 0
    is_pde = True

    def __init__(self):
        d = np.asarray(self.diffusion_coeffs, dtype=float)
        # per-component coefficients of the stiffness block: (+d, -d)
        self.component_diffusion = np.concatenate([d, -d])

    def default_params(self, **overrides):
        p = ModelParams(
            names=tuple(self.param_names),
            values=np.array(self.param_defaults, dtype=float),
            rho_index=self.rho_index,
        )
        return p.updated(**overrides) if overrides else p

    # subclass surface -------------------------------------------------
    def f(self, F, p):
        raise NotImplementedError

    def f_jac(self, F, p):
        raise NotImplementedError

    def control(self, F, p):
        raise NotImplementedError

    def j_c(self, F, p):
        raise NotImplementedError


# ----------------------------------------------------------------------
# shallow lake: state v (phosphorus), control kappa = -1/lambda


class ShallowLake(CanonicalModel):
    name = "sloc"
    nstates = 1
    param_names = ("b", "rho", "gamma", "D")
    param_defaults = (0.6, 0.03, 0.5, 0.5)
    rho_index = 1
    diffusion_coeffs = (0.5,)

    def __init__(self):
        # diffusion enters through the parameter D; keep coefficient hook in sync
        super().__init__()

    def f(self, F, p):
        v, lam = F
        b = p["b"]
        kap = -1.0 / lam
        f1 = kap - b * v + v * v / (1.0 + v * v)
        f2 = 2.0 * p["gamma"] * v + lam * (p["rho"] + b - 2.0 * v / (1.0 + v * v) ** 2)
        return np.array([f1, f2])

    def f_jac(self, F, p):
        v, lam = F
        b = p["b"]
        one = 1.0 + v * v
        J = np.zeros((2, 2, v.size))
        J[0, 0] = -b + 2.0 * v / one**2
        J[0, 1] = 1.0 / lam**2
        J[1, 0] = 2.0 * p["gamma"] - lam * 2.0 * (1.0 - 3.0 * v * v) / one**3
        J[1, 1] = p["rho"] + b - 2.0 * v / one**2
        return J

    def control(self, F, p):
        lam = F[1]
        if np.any(lam == 0.0):
            raise ZeroDivisionError("control kappa = -1/lambda undefined at lambda = 0")
        return -1.0 / lam

    def j_c(self, F, p):
        v = F[0]
        kap = self.control(F, p)
        if np.any(kap <= 0.0):
            raise DomainError("ln(kappa) undefined: control left the admissible region")
        return np.log(kap) - p["gamma"] * v * v


# ----------------------------------------------------------------------
# pollution: states (emissions v1, stock v2), control kappa = -(1+lambda1)/gamma


class Pollution(CanonicalModel):
    name = "pollution"
    nstates = 2
    param_names = ("rho", "p", "beta", "gamma", "d1", "d2")
    param_defaults = (0.5, 1.0, 0.2, 300.0, 0.001, 0.2)
    rho_index = 0
    diffusion_coeffs = (0.001, 0.2)

    def f(self, F, p):
        v1, v2, l1, l2 = F
        rho = p["rho"]
        kap = -(1.0 + l1) / p["gamma"]
        f1 = -kap
        f2 = v1 - v2 * (1.0 - v2)
        f3 = rho * l1 - p["p"] - l2
        f4 = (rho + 1.0 - 2.0 * v2) * l2 + p["beta"]
        return np.array([f1, f2, f3, f4])

    def f_jac(self, F, p):
        v1, v2, l1, l2 = F
        rho = p["rho"]
        n = v1.size
        J = np.zeros((4, 4, n))
        J[0, 2] = np.full(n, 1.0 / p["gamma"])
        J[1, 0] = np.ones(n)
        J[1, 1] = 2.0 * v2 - 1.0
        J[2, 2] = np.full(n, rho)
        J[2, 3] = np.full(n, -1.0)
        J[3, 1] = -2.0 * l2
        J[3, 3] = np.full(n, rho + 1.0 - 2.0 * v2)
        return J

    def control(self, F, p):
        return -(1.0 + F[2]) / p["gamma"]

    def j_c(self, F, p):
        v1, v2 = F[0], F[1]
        kap = self.control(F, p)
        # abatement cost consistent with the control law kappa = -(1+l1)/gamma:
        # maximizing J_c - l1 kappa requires C'(kappa) = 1 + gamma kappa
        cost = kap + 0.5 * p["gamma"] * kap * kap
        return p["p"] * v1 - p["beta"] * v2 - cost


class PollutionODE(Pollution):
    name = "pollution-ode"
    is_pde = False


# ----------------------------------------------------------------------
# toy ODE: driven oscillator with pendulum costates, no control


class Toy(CanonicalModel):
    name = "toy"
    nstates = 2
    param_names = ("rho", "omega", "theta")
    param_defaults = (1.0, 1.0, 1.0)
    rho_index = 0  # dynamical parameter here, not a discount rate
    diffusion_coeffs = (0.0, 0.0)
    is_pde = False

    def f(self, F, p):
        x1, x2, y1, y2 = F
        rho, om, th = p["rho"], p["omega"], p["theta"]
        r2 = x1 * x1 + x2 * x2
        f1 = rho * (-x1 + x1 * y1 * r2) - th * x2
        f2 = rho * (-x2 + x2 * y1 * r2) + th * x1
        f3 = om * y2
        f4 = om * np.sin(2.0 * np.pi * y1)
        return np.array([f1, f2, f3, f4])

    def f_jac(self, F, p):
        x1, x2, y1, y2 = F
        rho, om, th = p["rho"], p["omega"], p["theta"]
        r2 = x1 * x1 + x2 * x2
        n = x1.size
        J = np.zeros((4, 4, n))
        J[0, 0] = rho * (-1.0 + y1 * (3.0 * x1 * x1 + x2 * x2))
        J[0, 1] = -th + 2.0 * rho * y1 * x1 * x2
        J[0, 2] = rho * x1 * r2
        J[1, 0] = th + 2.0 * rho * y1 * x1 * x2
        J[1, 1] = rho * (-1.0 + y1 * (x1 * x1 + 3.0 * x2 * x2))
        J[1, 2] = rho * x2 * r2
        J[2, 3] = np.full(n, om)
        J[3, 2] = 2.0 * np.pi * om * np.cos(2.0 * np.pi * y1)
        return J

    def control(self, F, p):
        return np.empty(0)

    def j_c(self, F, p):
        return np.zeros(F.shape[1])


_REGISTRY = {m.name: m for m in (ShallowLake(), Pollution(), PollutionODE(), Toy())}


def get_model(name):
    try:
        return _REGISTRY[name]
    except KeyError:
        raise InvalidArgumentError(
            f"unknown model {name!r}; available: {sorted(_REGISTRY)}"
        ) from None


def model_names():
    return sorted(_REGISTRY)


# ----------------------------------------------------------------------
# discretized canonical system


def _check_sizes(model, fem, u):
    n = fem.n
    if u.size != 2 * model.nstates * n:
        raise InvalidArgumentError(
            f"field vector length {u.size} does not match 2*{model.nstates}*{n}"
        )
    return n


def residual_G(model, fem, u, p):
    """G(u) with M u' = -G(u): stiffness part minus mass-weighted reaction."""
    n = _check_sizes(model, fem, np.asarray(u))
    F = split_fields(u, model.nstates, n)
    fval = model.f(F, p)
    c = _diffusion_vector(model, p)
    G = c[:, None] * (fem.K @ F.T).T - (fem.M @ fval.T).T
    return G.reshape(-1)


def _diffusion_vector(model, p):
    if model.name == "sloc":
        d = np.array([p["D"]])
    elif model.name in ("pollution", "pollution-ode"):
        d = np.array([p["d1"], p["d2"]])
    else:
        d = np.asarray(model.diffusion_coeffs, dtype=float)
    return np.concatenate([d, -d])


def jacobian_G(model, fem, u, p):
    """Sparse Jacobian of residual_G at u."""
    n = _check_sizes(model, fem, np.asarray(u))
    N2 = 2 * model.nstates
    F = split_fields(u, model.nstates, n)
    Jf = model.f_jac(F, p)
    c = _diffusion_vector(model, p)
    blocks = [[None] * N2 for _ in range(N2)]
    for i in range(N2):
        for j in range(N2):
            col = Jf[i, j]
            blk = None
            if np.any(col != 0.0):
                blk = -(fem.M @ sp.diags(col))
            if i == j and c[i] != 0.0:
                blk = c[i] * fem.K if blk is None else blk + c[i] * fem.K
            blocks[i][j] = blk
    return sp.bmat(blocks, format="csr")


def control_of(model, u, p, n=None):
    """Nodewise control field; empty array for models without a control."""
    u = np.asarray(u)
    if n is None:
        n = u.size // (2 * model.nstates)
    F = split_fields(u, model.nstates, n)
    return model.control(F, p)


def current_value(model, fem, u, p):
    """Spatially averaged current value J_ca (plain j_c for ODE models)."""
    n = _check_sizes(model, fem, np.asarray(u))
    F = split_fields(u, model.nstates, n)
    jc = model.j_c(F, p)
    if not model.is_pde or fem.mesh is None:
        return float(jc[0])
    return float(np.sum(fem.M @ jc) / fem.omega)


# ----------------------------------------------------------------------
# model-specific seeds and analytics


def pollution_flat_css(p, n=1):
    """Closed-form spatially constant steady state of the pollution model."""
    rho, pp, beta = p["rho"], p["p"], p["beta"]
    z = 0.5 * (1.0 + rho - beta / (pp + rho))
    comp = np.array([z * (1.0 - z), z, -1.0, -(pp + rho)])
    return np.repeat(comp, n)


def sloc_flat_seed(p, branch="FSC", n=1, tol=1e-12, max_iter=50):
    """Newton-refined flat root of the shallow-lake steady system.

    branch selects the starting guess: "FSC" aims at the low-v root,
    "FSM" at the high-v root.
    """
    b, gam, rho = p["b"], p["gamma"], p["rho"]
    starts = {"FSC": 0.25, "FSM": 2.0}
    if branch not in starts:
        raise InvalidArgumentError(f"branch selector must be FSC or FSM, got {branch!r}")
    v = starts[branch]
    kap = b * v - v * v / (1.0 + v * v)
    if kap <= 0:
        raise NoConvergenceError("seed start outside the admissible region")
    x = np.array([v, -1.0 / kap])

    def sys(x):
        v, lam = x
        one = 1.0 + v * v
        r1 = -1.0 / lam - b * v + v * v / one
        r2 = 2.0 * gam * v + lam * (rho + b - 2.0 * v / one**2)
        return np.array([r1, r2])

    def jac(x):
        v, lam = x
        one = 1.0 + v * v
        return np.array(
            [
                [-b + 2.0 * v / one**2, 1.0 / lam**2],
                [2.0 * gam - lam * 2.0 * (1.0 - 3.0 * v * v) / one**3,
                 rho + b - 2.0 * v / one**2],
            ]
        )

    for _ in range(max_iter):
        r = sys(x)
        if np.max(np.abs(r)) < tol:
            break
        try:
            dx = np.linalg.solve(jac(x), -r)
        except np.linalg.LinAlgError:
            raise NoConvergenceError("singular Jacobian in flat-seed Newton")
        # damp steps that would leave the admissible half-plane lambda < 0
        step = 1.0
        while x[1] + step * dx[1] >= 0.0 and step > 1e-6:
            step *= 0.5
        x = x + step * dx
        if not np.all(np.isfinite(x)):
            raise NoConvergenceError("flat-seed Newton diverged")
    else:
        raise NoConvergenceError(
            f"flat-seed Newton did not reach tol={tol}", residual=float(np.max(np.abs(sys(x))))
        )
    # reject convergence onto the wrong root family
    if branch == "FSM" and x[0] < 1.0:
        raise NoConvergenceError("high-v flat root not found (branch vanished)")
    if branch == "FSC" and x[0] > 1.0:
        raise NoConvergenceError("low-v flat root not found (branch vanished)")
    return np.repeat(x, n)


def toy_analytics(p):
    """Analytic periodic orbit, multipliers, and first integral of the toy model.

    Returns a dict with the orbit sampler (rescaled time on [0, 1]), the
    period, the four multipliers of the variational flow over one period,
    the polar-coordinates variational matrix, and the energy E(y1, y2).
    """
    rho, om, th = p["rho"], p["omega"], p["theta"]
    if min(rho, om, th) <= 0:
        raise InvalidArgumentError("toy analytics require rho, omega, theta > 0")
    Tp = 2.0 * np.pi / th
    s = np.sqrt(2.0 * np.pi)

    def orbit(t):
        t = np.asarray(t, dtype=float)
        phi = 2.0 * np.pi * t
        out = np.stack(
            [np.cos(phi), np.sin(phi), np.ones_like(phi), np.zeros_like(phi)], axis=-1
        )
        return out

    multipliers = np.array(
        [
            1.0,
            np.exp(-2.0 * np.pi * s * om / th),
            np.exp(4.0 * np.pi * rho / th),
            np.exp(2.0 * np.pi * s * om / th),
        ]
    )
    # variational matrix in polar coordinates (r, phi, y1, y2) on the orbit
    var_polar = np.array(
        [
            [2.0 * rho, 0.0, rho, 0.0],
            [0.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, om],
            [0.0, 0.0, 2.0 * np.pi * om, 0.0],
        ]
    )

    def energy(y1, y2):
        return 0.5 * np.asarray(y2) ** 2 + om * om / (2.0 * np.pi) * np.cos(
            2.0 * np.pi * np.asarray(y1)
        )

    return {
        "orbit": orbit,
        "period": Tp,
        "multipliers": multipliers,
        "var_polar": var_polar,
        "energy": energy,
    }
