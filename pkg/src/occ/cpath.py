"""Canonical paths: trapezoidal two-point BVP with projection boundary
conditions, homotopy continuation in the initial states (natural, secant,
arclength), free truncation time with an epsilon-sphere closure for steady
targets, and period appending for periodic targets.

The truncated problem on the rescaled interval t in [0, 1] is
    M u' = -T G(u),  v(0) = v0,  Psi (u(1) - u_hat) = 0   (steady target)
                              or P (u(1) - u_hat0) = 0    (periodic target),
with T fixed or free. For steady targets a freed T is closed by the
weighted-L2 sphere ||u(1) - u_hat||_2 = eps; for periodic targets T is
always an unknown, the projection supplying the extra condition. The
stacked Newton systems are solved by sparse LU on the block-bidiagonal
core, with the scalar borders (T, alpha, closure) removed by a Schur
complement.
"""

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import InvalidArgumentError, NoConvergenceError, SaddlePointError
from .models import _diffusion_vector
from .periodic import CpsTarget
from .steady import CssTarget
from .value import path_value


@dataclass
class CpSettings:
    """Controls for the canonical-path continuation driver."""

    nti: int = 61            # initial number of time mesh points
    T: float | None = None   # initial truncation time (None: estimate)
    nTp: int = 2             # periods in the initial T of periodic targets
    freeT: bool = False      # free T from the start (steady targets)
    eps_inf: float = np.inf  # sup-norm deviation triggering T handling
    eps2: float | None = None  # weighted-L2 closure radius (None: 1/10 rule)
    msw: int = 0             # natural predictor: 0 trivial, 1 secant
    sig: float = 0.1         # arclength stepsize
    sigmin: float = 1e-2
    sigmax: float = 10.0
    xi: float = 0.2          # secant weight in the arclength closure
    retsw: int = 0           # 1: retain the path of every continuation step
    tol: float = 1e-8
    max_newton: int = 12
    T_cap_periods: float = 20.0  # period-appending cap, in units of T_p

    def __post_init__(self):
        if not (0 < self.sigmin <= self.sig <= self.sigmax):
            raise InvalidArgumentError("need 0 < sigmin <= sig <= sigmax")
        if not (0 < self.xi <= 1):
            raise InvalidArgumentError("need 0 < xi <= 1")
        if self.nti < 5:
            raise InvalidArgumentError("need at least 5 time mesh points")


@dataclass
class CanonicalPath:
    t_mesh: np.ndarray   # (m,) increasing, t[0] = 0, t[-1] = 1
    u: np.ndarray        # (m, n_u)
    T: float
    alpha: float
    target_kind: str     # "css" | "cps"
    params: object

    @property
    def m(self):
        return self.t_mesh.size

    @property
    def n_u(self):
        return self.u.shape[1]


@dataclass
class CpHistory:
    alphas: list = field(default_factory=list)
    values: list = field(default_factory=list)
    Ts: list = field(default_factory=list)
    v0s: list = field(default_factory=list)
    paths: list = field(default_factory=list)   # all steps when retsw = 1
    stalled: bool = False

    def last_two(self):
        if len(self.paths) >= 2 and len(self.alphas) >= 2:
            return self.paths[-2], self.paths[-1]
        return None


def target_kind(target):
    if isinstance(target, CssTarget):
        return "css"
    if isinstance(target, CpsTarget):
        return "cps"
    raise InvalidArgumentError(f"unsupported target type {type(target).__name__}")


def target_state(target):
    """Field vector the projection is anchored at."""
    if isinstance(target, CssTarget):
        return target.u_hat
    return target.u_hat0


def target_params(target):
    if isinstance(target, CssTarget):
        return target.params
    return target.orbit.params


def init_T(target, settings):
    """First guess for the truncation time."""
    if settings.T is not None:
        return float(settings.T)
    if isinstance(target, CssTarget):
        if not np.isfinite(target.T_suggest) or target.T_suggest <= 0:
            raise InvalidArgumentError("target carries no usable decay time")
        return float(target.T_suggest)
    return float(settings.nTp * target.orbit.T_p)


# ----------------------------------------------------------------------
# batched evaluation of G and dG over all mesh points


class _SystemCache:
    """Constant sparsity pattern of dG plus batch evaluators; per-iteration
    assembly reduces to filling value arrays."""

    def __init__(self, model, fem, params):
        self.model = model
        self.fem = fem
        self.params = params
        self.n = fem.n
        self.N2 = 2 * model.nstates
        self.n_u = self.N2 * self.n
        self.c = _diffusion_vector(model, params)
        self.K_dense = fem.K.toarray()
        self.M_dense = fem.M.toarray()
        self.mass_full = np.kron(np.eye(self.N2), self.M_dense)
        self.mass_coo = sp.coo_matrix(sp.kron(sp.eye(self.N2), fem.M))

        Msp = fem.M.tocoo()
        self.m_cols = Msp.col
        self.m_vals = Msp.data
        K = fem.K.tocoo()
        rows, cols, kvals = [], [], []
        for i in range(self.N2):
            rows.append(K.row + i * self.n)
            cols.append(K.col + i * self.n)
            kvals.append(self.c[i] * K.data)
        self.pairs = [(i, k) for i in range(self.N2) for k in range(self.N2)]
        for i, k in self.pairs:
            rows.append(Msp.row + i * self.n)
            cols.append(Msp.col + k * self.n)
        self.rows = np.concatenate(rows)
        self.cols = np.concatenate(cols)
        self.k_static = np.concatenate(kvals)
        self.nnz_static = self.k_static.size
        self.nnz_pair = self.m_vals.size
        self.nnz = self.nnz_static + self.nnz_pair * len(self.pairs)

    def g_batch(self, U):
        """residual_G for each row of U: (m, n_u) -> (m, n_u)."""
        m = U.shape[0]
        F = U.reshape(m, self.N2, self.n)
        Fcat = F.transpose(1, 0, 2).reshape(self.N2, m * self.n)
        fval = self.model.f(Fcat, self.params)
        fval = fval.reshape(self.N2, m, self.n).transpose(1, 0, 2)
        G = (self.c[None, :, None] * (F @ self.K_dense.T)
             - fval @ self.M_dense.T)
        return G.reshape(m, self.n_u)

    def gu_values(self, U):
        """dG values at each row of U, aligned with (self.rows, self.cols)."""
        m = U.shape[0]
        F = U.reshape(m, self.N2, self.n)
        Fcat = F.transpose(1, 0, 2).reshape(self.N2, m * self.n)
        Jf = self.model.f_jac(Fcat, self.params).reshape(
            self.N2, self.N2, m, self.n)
        vals = np.empty((m, self.nnz))
        vals[:, : self.nnz_static] = self.k_static[None, :]
        off = self.nnz_static
        npair = self.nnz_pair
        for p, (i, k) in enumerate(self.pairs):
            vals[:, off + p * npair: off + (p + 1) * npair] = (
                -self.m_vals[None, :] * Jf[i, k][:, self.m_cols])
        return vals


def _projection_rows(target):
    return target.Psi if isinstance(target, CssTarget) else target.P


def solve_cp_bvp(model, fem, target, v0, path_guess, T, freeT, settings,
                 alpha=None, arc=None, cache=None, params=None, debug=False):
    """Newton solve of the stacked truncated BVP.

    arc: optional dict (keys s, s_alpha, sigma, ref_u0, ref_alpha, v0_star,
    v_hat) switching on the arclength closure with alpha as an unknown; the
    initial states are then recomputed from alpha every iteration.
    Returns (path, info) with info carrying the final alpha and residual.
    debug=True returns the first assembled system instead of iterating:
    (res, core, bcols, brows, border_res, bcol_names).
    """
    if params is None:
        params = path_guess.params
    kind = target_kind(target)
    if target.defect != 0:
        raise SaddlePointError("target violates the saddle-point property",
                               defect=target.defect)
    if cache is None:
        cache = _SystemCache(model, fem, params)
    n_u = cache.n_u
    Nn = n_u // 2

    t = path_guess.t_mesh
    m = t.size
    h = np.diff(t)
    U = path_guess.u.copy()
    uhat = target_state(target)
    proj = _projection_rows(target)

    free_T = bool(freeT) or kind == "cps"
    use_eps = bool(freeT) and kind == "css"
    use_arc = arc is not None
    if use_eps:
        if settings.eps2 is None:
            raise InvalidArgumentError("free-T steady solve needs eps2")
        eps2 = float(settings.eps2)
    Tcur = float(T)
    acur = float(alpha if alpha is not None else 1.0)
    if use_arc:
        v0 = acur * arc["v0_star"] + (1.0 - acur) * arc["v_hat"]
    v0 = np.asarray(v0, dtype=float)
    if v0.size != Nn:
        raise InvalidArgumentError(f"initial states must have length {Nn}")

    n_core = m * n_u
    proj_core = proj[:Nn]
    proj_border = proj[Nn:]  # empty for steady targets
    pr_core = sp.coo_matrix(proj_core)
    mass_coo = cache.mass_coo
    Mdense_full = cache.mass_full

    for it in range(settings.max_newton + 1):
        if use_arc:
            v0 = acur * arc["v0_star"] + (1.0 - acur) * arc["v_hat"]
        G = cache.g_batch(U)
        dU = np.diff(U, axis=0)
        res_traj = dU @ Mdense_full.T / h[:, None] + 0.5 * Tcur * (G[:-1] + G[1:])
        dev_end = U[-1] - uhat
        res = np.concatenate([U[0, :Nn] - v0, res_traj.ravel(),
                              proj_core @ dev_end])
        border_res = []
        brow_names = []
        if kind == "cps":
            border_res.append(float(proj_border[0] @ dev_end))
            brow_names.append("proj")
        if use_eps:
            border_res.append(float(np.mean(dev_end**2) - eps2**2))
            brow_names.append("eps")
        if use_arc:
            border_res.append(
                float(arc["s"] @ (U[0] - arc["ref_u0"]) / n_u
                      + arc["s_alpha"] * (acur - arc["ref_alpha"])
                      - arc["sigma"]))
            brow_names.append("arc")
        rmax = max(float(np.max(np.abs(res))),
                   max((abs(b) for b in border_res), default=0.0))
        if rmax < settings.tol and not debug:
            path = CanonicalPath(t_mesh=t.copy(), u=U, T=Tcur, alpha=acur,
                                 target_kind=kind, params=params)
            return path, {"alpha": acur, "residual": rmax, "iters": it}
        if it == settings.max_newton and not debug:
            raise NoConvergenceError(
                f"canonical-path Newton stalled at residual {rmax:.3e}",
                residual=rmax)

        gu_vals = cache.gu_values(U)
        coo_r = [np.arange(Nn)]
        coo_c = [np.arange(Nn)]
        coo_v = [np.ones(Nn)]
        for j in range(m - 1):
            r0 = Nn + j * n_u
            coo_r.append(mass_coo.row + r0)
            coo_c.append(mass_coo.col + j * n_u)
            coo_v.append(-mass_coo.data / h[j])
            coo_r.append(cache.rows + r0)
            coo_c.append(cache.cols + j * n_u)
            coo_v.append(0.5 * Tcur * gu_vals[j])
            coo_r.append(mass_coo.row + r0)
            coo_c.append(mass_coo.col + (j + 1) * n_u)
            coo_v.append(mass_coo.data / h[j])
            coo_r.append(cache.rows + r0)
            coo_c.append(cache.cols + (j + 1) * n_u)
            coo_v.append(0.5 * Tcur * gu_vals[j + 1])
        r0 = Nn + (m - 1) * n_u
        coo_r.append(pr_core.row + r0)
        coo_c.append(pr_core.col + (m - 1) * n_u)
        coo_v.append(pr_core.data)
        core = sp.coo_matrix(
            (np.concatenate(coo_v),
             (np.concatenate(coo_r), np.concatenate(coo_c))),
            shape=(n_core, n_core)).tocsc()

        bcol_names = []
        bcols = []
        if free_T:
            tcol = np.zeros(n_core)
            tcol[Nn:Nn + (m - 1) * n_u] = (0.5 * (G[:-1] + G[1:])).ravel()
            bcols.append(tcol)
            bcol_names.append("T")
        if use_arc:
            acol = np.zeros(n_core)
            acol[:Nn] = -(arc["v0_star"] - arc["v_hat"])
            bcols.append(acol)
            bcol_names.append("alpha")
        brows = []
        for name in brow_names:
            row = np.zeros(n_core)
            if name == "proj":
                row[(m - 1) * n_u:] = proj_border[0]
            elif name == "eps":
                row[(m - 1) * n_u:] = 2.0 * dev_end / n_u
            elif name == "arc":
                row[:n_u] = arc["s"] / n_u
            brows.append(row)

        if debug:
            return res, core, bcols, brows, border_res, bcol_names

        nb = len(bcols)
        if nb != len(brows):
            raise InvalidArgumentError(
                f"unbalanced bordered system: {nb} columns vs {len(brows)} rows")
        try:
            lu = spla.splu(core)
        except RuntimeError as exc:
            raise NoConvergenceError(f"core LU failed: {exc}", residual=rmax)
        if nb == 0:
            dx = lu.solve(-res)
            U += dx.reshape(m, n_u)
        else:
            sol = lu.solve(-np.column_stack([res] + bcols))
            y0, Y = sol[:, 0], sol[:, 1:]
            S = np.empty((nb, nb))
            rhsb = np.empty(nb)
            for i, rname in enumerate(brow_names):
                for jj, cname in enumerate(bcol_names):
                    S[i, jj] = brows[i] @ Y[:, jj]
                    if rname == "arc" and cname == "alpha":
                        S[i, jj] += arc["s_alpha"]
                rhsb[i] = -border_res[i] - brows[i] @ y0
            try:
                dxb = np.linalg.solve(S, rhsb)
            except np.linalg.LinAlgError:
                raise NoConvergenceError("singular border Schur complement",
                                         residual=rmax)
            dx = y0 + Y @ dxb
            U += dx.reshape(m, n_u)
            for name, d in zip(bcol_names, dxb):
                if name == "T":
                    Tcur += d
                else:
                    acur += d
        if not np.all(np.isfinite(U)) or not np.isfinite(Tcur) or Tcur <= 0:
            raise NoConvergenceError("canonical-path Newton diverged",
                                     residual=rmax)


def constant_path(target, T, settings, params=None):
    """Guess for the homotopy start: the target state held constant."""
    if params is None:
        params = target_params(target)
    uhat = target_state(target)
    t = np.linspace(0.0, 1.0, settings.nti)
    return CanonicalPath(t_mesh=t, u=np.tile(uhat, (settings.nti, 1)), T=T,
                         alpha=0.0, target_kind=target_kind(target),
                         params=params)


def tiled_cps_path(target, T, params=None):
    """Guess for a periodic target: whole copies of the orbit, anchored so
    the path starts and ends at u_hat0."""
    if params is None:
        params = target_params(target)
    orb = target.orbit
    n_periods = max(1, int(round(T / orb.T_p)))
    a = target.anchor_index
    W = np.roll(orb.u[:-1], -a, axis=0)
    hr = np.roll(np.diff(orb.t_mesh), -a)
    mred = W.shape[0]
    tlist = [0.0]
    rows = [W[0]]
    for _ in range(n_periods):
        for j in range(mred):
            tlist.append(tlist[-1] + hr[j])
            rows.append(W[(j + 1) % mred])
    t = np.asarray(tlist) / n_periods
    t[-1] = 1.0
    return CanonicalPath(t_mesh=t, u=np.asarray(rows), T=float(T), alpha=0.0,
                         target_kind="cps", params=params)


def free_T_policy(model, fem, path, target, settings, cache=None):
    """Steady targets: when the endpoint misses u_hat by more than eps_inf
    in sup norm, free T with the weighted-L2 closure (radius eps2, default
    one tenth of the current deviation) and re-solve. Returns
    (path, activated)."""
    if target_kind(target) != "css":
        return path, False
    dev_inf = float(np.max(np.abs(path.u[-1] - target.u_hat)))
    if dev_inf <= settings.eps_inf:
        return path, False
    eps2 = settings.eps2 if settings.eps2 is not None else dev_inf / 10.0
    local = replace(settings, eps2=eps2)
    Nn = path.n_u // 2
    new_path, _ = solve_cp_bvp(model, fem, target, path.u[0, :Nn], path,
                               path.T, freeT=True, settings=local,
                               alpha=path.alpha, cache=cache)
    return new_path, True


def extend_T_cps(model, fem, path, target, settings, cache=None):
    """Periodic targets: while the endpoint misses the anchor by more than
    eps_inf in sup norm, append one orbit period to the path, renormalize
    the mesh to [0, 1], and re-run Newton. The sup-norm check is only the
    loop guard, never an equation. Returns (path, periods_appended)."""
    if target_kind(target) != "cps":
        return path, 0
    orb = target.orbit
    Tp = orb.T_p
    cap = settings.T_cap_periods * Tp
    appended = 0
    Nn = path.n_u // 2
    a = target.anchor_index
    W = np.roll(orb.u[:-1], -a, axis=0)
    hr = np.roll(np.diff(orb.t_mesh), -a)
    mred = W.shape[0]
    while float(np.max(np.abs(path.u[-1] - target.u_hat0))) > settings.eps_inf:
        if path.T + Tp > cap:
            raise NoConvergenceError(
                f"period appending exceeded {settings.T_cap_periods} periods")
        T_new = path.T + Tp
        t_old = path.t_mesh * (path.T / T_new)
        t_app = [t_old[-1]]
        rows = [path.u[-1]]
        for j in range(mred):
            t_app.append(t_app[-1] + hr[j] * Tp / T_new)
            rows.append(W[(j + 1) % mred])
        t = np.concatenate([t_old[:-1], np.asarray(t_app)])
        t[-1] = 1.0
        U = np.vstack([path.u[:-1], np.asarray(rows)])
        guess = CanonicalPath(t_mesh=t, u=U, T=T_new, alpha=path.alpha,
                              target_kind="cps", params=path.params)
        path, _ = solve_cp_bvp(model, fem, target, path.u[0, :Nn], guess,
                               T_new, freeT=False, settings=settings,
                               alpha=path.alpha, cache=None)
        appended += 1
    return path, appended


def _record(history, model, fem, path, v0, settings):
    history.alphas.append(path.alpha)
    history.values.append(path_value(model, fem, path))
    history.Ts.append(path.T)
    history.v0s.append(np.asarray(v0).copy())
    history.paths.append(path)
    if not settings.retsw and len(history.paths) > 2:
        history.paths.pop(0)


def _predict_natural(history, path, a, settings):
    # secant predictor: extrapolate the last two paths linearly in alpha
    if settings.msw == 1 and history.last_two() is not None:
        p2, p1 = history.last_two()
        a2, a1 = history.alphas[-2], history.alphas[-1]
        if p1.u.shape == p2.u.shape and a1 != a2:
            slope = (p1.u - p2.u) / (a1 - a2)
            return replace(p1, u=p1.u + (a - a1) * slope,
                           t_mesh=p1.t_mesh.copy())
    return replace(path, u=path.u.copy(), t_mesh=path.t_mesh.copy())


def isc(model, fem, target, v0_star, alvin, n_arc=0, settings=None,
        history=None, params=None):
    """Continuation of canonical paths in the initial states.

    alvin: increasing homotopy values in (0, 1] for natural continuation;
    may be empty to restart directly with arclength from stored history.
    n_arc: pseudo-arclength steps appended after alvin (rounds folds in
    alpha). Returns (path, history); history.stalled marks an unfinished
    homotopy.
    """
    if settings is None:
        settings = CpSettings()
    if params is None:
        params = target_params(target)
    kind = target_kind(target)
    if target.defect != 0:
        raise SaddlePointError("target violates the saddle-point property",
                               defect=target.defect)
    v0_star = np.asarray(v0_star, dtype=float)
    v_hat = target_state(target)[: v0_star.size].copy()
    cache = _SystemCache(model, fem, params)

    alvin = list(alvin)
    if any(a <= 0 or a > 1 for a in alvin):
        raise InvalidArgumentError("homotopy values must lie in (0, 1]")
    if sorted(alvin) != alvin:
        raise InvalidArgumentError("homotopy values must increase")

    if history is None or not history.paths:
        history = CpHistory() if history is None else history
        if not alvin:
            raise InvalidArgumentError(
                "fresh continuation needs at least one homotopy value")
        T0 = init_T(target, settings)
        if kind == "css":
            path = constant_path(target, T0, settings, params)
        else:
            path = tiled_cps_path(target, T0, params)
    else:
        path = history.paths[-1]

    history.stalled = False
    for a in alvin:
        v0 = a * v0_star + (1.0 - a) * v_hat
        guess = _predict_natural(history, path, a, settings)
        try:
            new_path, _ = solve_cp_bvp(
                model, fem, target, v0, guess, guess.T,
                freeT=settings.freeT and kind == "css",
                settings=settings, alpha=a, cache=cache)
            if kind == "css":
                new_path, _ = free_T_policy(model, fem, new_path, target,
                                            settings, cache=cache)
            else:
                new_path, _ = extend_T_cps(model, fem, new_path, target,
                                           settings, cache=cache)
        except NoConvergenceError:
            history.stalled = True
            break
        path = new_path
        _record(history, model, fem, path, v0, settings)

    done = bool(history.alphas) and history.alphas[-1] >= 1.0
    sigma = settings.sig
    steps = 0
    while n_arc and steps < n_arc and not done:
        if history.last_two() is None:
            raise InvalidArgumentError(
                "arclength restart needs two previous continuation steps")
        try:
            path, done = arc_step(model, fem, target, v0_star, v_hat,
                                  history, sigma, settings, cache)
            history.stalled = False
        except NoConvergenceError:
            sigma *= 0.5
            if sigma < settings.sigmin:
                history.stalled = True
                break
            continue
        steps += 1
        sigma = min(settings.sigmax, 1.2 * sigma)
    return (history.paths[-1] if history.paths else path), history


def arc_step(model, fem, target, v0_star, v_hat, history, sigma, settings,
             cache=None):
    """One pseudo-arclength step in (path, alpha).

    The boundary condition <s, u(0) - u0_prev>_w + s_alpha (alpha -
    alpha_prev) = sigma uses the weighted-normalized initial-point secant
    scaled to xi and s_alpha = 1 - xi; the predictor uses the full-path
    secant with the same weights. Returns (path, reached_alpha_one).
    """
    pair = history.last_two()
    if pair is None:
        raise InvalidArgumentError("arclength step needs two previous steps")
    p2, p1 = pair
    a2, a1 = history.alphas[-2], history.alphas[-1]
    if p1.u.shape != p2.u.shape:
        # mesh changed between the stored steps (period appending);
        # degenerate to a natural step direction
        p2 = replace(p1, u=p1.u.copy())
        a2 = a1 - max(1e-3, sigma * (1 - settings.xi))
    xi = settings.xi
    d0 = p1.u[0] - p2.u[0]
    nrm0 = np.sqrt(np.mean(d0 * d0))
    s = xi * d0 / nrm0 if nrm0 > 0 else np.zeros_like(d0)
    s_alpha = 1.0 - xi

    dpath = p1.u - p2.u
    nrmp = np.sqrt(np.mean(dpath * dpath))
    tau = xi * dpath / nrmp if nrmp > 0 else np.zeros_like(dpath)
    da = a1 - a2
    tau_alpha = (1.0 - xi) * (np.sign(da) if da != 0 else 1.0)

    guess = replace(p1, u=p1.u + sigma * tau, t_mesh=p1.t_mesh.copy())
    a_pred = a1 + sigma * tau_alpha
    arc = {"s": s, "s_alpha": s_alpha, "sigma": sigma,
           "ref_u0": p1.u[0].copy(), "ref_alpha": a1,
           "v0_star": v0_star, "v_hat": v_hat}
    kind = target_kind(target)
    path, info = solve_cp_bvp(model, fem, target, None, guess, p1.T,
                              freeT=settings.freeT and kind == "css",
                              settings=settings, alpha=a_pred, arc=arc,
                              cache=cache)
    a_new = info["alpha"]
    if kind == "css":
        path, _ = free_T_policy(model, fem, path, target, settings, cache=cache)
    else:
        path, _ = extend_T_cps(model, fem, path, target, settings, cache=cache)
    reached = False
    if a_new >= 1.0:
        final, _ = solve_cp_bvp(model, fem, target, v0_star, path, path.T,
                                freeT=settings.freeT and kind == "css",
                                settings=settings, alpha=1.0, cache=cache)
        if kind == "css":
            final, _ = free_T_policy(model, fem, final, target, settings,
                                     cache=cache)
        else:
            final, _ = extend_T_cps(model, fem, final, target, settings,
                                    cache=cache)
        path, a_new = final, 1.0
        reached = True
    v0_new = a_new * v0_star + (1 - a_new) * v_hat
    _record(history, model, fem, path, v0_new, settings)
    return path, reached
