"""Newton correction and arclength continuation of canonical steady states.

Stability bookkeeping uses the generalized spectrum of (dG, M). With the
flow convention du/dt = -G(u), eigenvalues with positive real part are the
decaying (flow-stable) directions; the saddle defect is the shortfall of
that count relative to N*n.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from .errors import InvalidArgumentError, NoConvergenceError, SaddlePointError
from .models import current_value, jacobian_G, residual_G

_MARGINAL = 1e-10  # eigenvalues with |Re| below this count as flow-stable


@dataclass
class BranchPoint:
    u: np.ndarray
    params: object
    arclength: float
    j_ca: float
    n_neg: int
    stability_tag: str
    tangent_param: float = 0.0  # parameter component of the arriving tangent


@dataclass
class Branch:
    param_name: str
    points: list = field(default_factory=list)
    events: list = field(default_factory=list)   # raw index pairs of n_neg jumps
    folds: list = field(default_factory=list)    # parameter values at direction reversals
    failed: bool = False

    def param_values(self):
        return np.array([bp.params[self.param_name] for bp in self.points])


@dataclass
class BifurcationEvent:
    param_name: str
    param_value: float
    kind: str  # "steady" | "hopf"
    u: np.ndarray
    params: object
    omega: float  # imaginary part of the crossing pair (0 for steady)
    eigvec: np.ndarray
    spatial_mode: int


@dataclass
class CssTarget:
    u_hat: np.ndarray
    params: object
    defect: int
    Psi: np.ndarray
    spectrum: np.ndarray
    T_suggest: float
    nstates: int


def newton_css(model, fem, u_guess, params, tol=1e-10, max_iter=20):
    """Newton iteration for G(u) = 0 starting from u_guess."""
    u = np.asarray(u_guess, dtype=float).copy()
    if not np.all(np.isfinite(u)):
        raise InvalidArgumentError("steady-state guess contains non-finite entries")
    res = np.inf
    for _ in range(max_iter):
        g = residual_G(model, fem, u, params)
        res = float(np.max(np.abs(g)))
        if res < tol:
            return u
        A = jacobian_G(model, fem, u, params)
        try:
            du = spla.spsolve(A.tocsc(), -g)
        except RuntimeError as exc:
            raise NoConvergenceError(f"linear solve failed: {exc}", residual=res)
        u = u + du
        if not np.all(np.isfinite(u)):
            raise NoConvergenceError("Newton iterate diverged", residual=res)
    g = residual_G(model, fem, u, params)
    res = float(np.max(np.abs(g)))
    if res < tol:
        return u
    raise NoConvergenceError(
        f"no convergence in {max_iter} Newton steps", residual=res
    )


def generalized_spectrum(model, fem, u, params):
    """Eigenvalues and right eigenvectors of dG w = mu M w (dense)."""
    A = jacobian_G(model, fem, u, params).toarray()
    B = _mass_full(model, fem)
    mu, W = sla.eig(A, B)
    order = np.argsort(mu.real)
    return mu[order], W[:, order]


def _mass_full(model, fem):
    n2 = 2 * model.nstates
    return np.kron(np.eye(n2), fem.M.toarray())


def count_unstable(mu):
    """Number of flow-unstable directions (Re mu < 0, marginal counted stable)."""
    if np.any(np.abs(mu.real) < _MARGINAL):
        warnings.warn("near-marginal eigenvalue encountered; counted as flow-stable")
    return int(np.sum(mu.real < -_MARGINAL))


def _param_derivative(model, fem, u, params, name, h=None):
    p0 = params[name]
    if h is None:
        h = 1e-6 * (1.0 + abs(p0))
    gp = residual_G(model, fem, u, params.updated(**{name: p0 + h}))
    gm = residual_G(model, fem, u, params.updated(**{name: p0 - h}))
    return (gp - gm) / (2.0 * h)


def _make_point(model, fem, u, params, s):
    mu, _ = generalized_spectrum(model, fem, u, params)
    n_neg = count_unstable(mu)
    try:
        jca = current_value(model, fem, u, params)
    except Exception:
        jca = np.nan
    tag = "stable" if n_neg == 0 else f"unstable({n_neg})"
    return BranchPoint(u=u.copy(), params=params, arclength=s, j_ca=jca,
                       n_neg=n_neg, stability_tag=tag)


def _corrector(model, fem, u, pval, param_name, params, tangent, ref, wu, tol, max_iter=12):
    """Bordered Newton: G(u, p) = 0 plus tangent-orthogonality to the predictor."""
    tu, tp = tangent
    for _ in range(max_iter):
        pcur = params.updated(**{param_name: pval})
        g = residual_G(model, fem, u, pcur)
        c = wu * tu @ (u - ref[0]) + tp * (pval - ref[1])
        if max(np.max(np.abs(g)), abs(c)) < tol:
            return u, pval, True
        A = jacobian_G(model, fem, u, pcur).toarray()
        gp = _param_derivative(model, fem, u, pcur, param_name)
        big = np.zeros((u.size + 1, u.size + 1))
        big[: u.size, : u.size] = A
        big[: u.size, -1] = gp
        big[-1, : u.size] = wu * tu
        big[-1, -1] = tp
        try:
            dx = np.linalg.solve(big, -np.concatenate([g, [c]]))
        except np.linalg.LinAlgError:
            return u, pval, False
        u = u + dx[:-1]
        pval = pval + dx[-1]
        if not np.all(np.isfinite(u)):
            return u, pval, False
    return u, pval, False


def continue_css(model, fem, start, param_name, ds, n_steps,
                 tol=1e-8, ds_min=None, ds_max=None, detect=True):
    """Pseudo-arclength continuation of a CSS branch in one parameter.

    Secant tangents, stepsize halved on corrector failure and doubled after
    three easy successes, clamped to [ds_min, ds_max]. Eigenvalue-count
    changes are recorded as raw crossing intervals in branch.events.
    """
    if ds == 0:
        raise InvalidArgumentError("continuation stepsize ds must be nonzero")
    if ds_min is None:
        ds_min = abs(ds) / 64.0
    if ds_max is None:
        ds_max = 4.0 * abs(ds)

    u0 = np.asarray(start.u, dtype=float)
    params = start.params
    p0 = params[param_name]
    wu = 1.0 / u0.size  # weighted inner product on the field part

    branch = Branch(param_name=param_name)
    branch.points.append(_make_point(model, fem, u0, params, 0.0))

    # initial tangent from the parameter derivative of G
    A = jacobian_G(model, fem, u0, params).toarray()
    gp = _param_derivative(model, fem, u0, params, param_name)
    du_dp = np.linalg.solve(A, -gp)
    tp = np.sign(ds) / np.sqrt(1.0 + wu * du_dp @ du_dp)
    tu = du_dp * tp
    sgn = 1.0
    branch.points[0].tangent_param = tp

    s = 0.0
    step = abs(ds)
    easy = 0
    u, pval = u0.copy(), p0
    k = 0
    while k < n_steps:
        pred_u = u + step * tu * sgn
        pred_p = pval + step * tp * sgn
        unew, pnew, ok = _corrector(
            model, fem, pred_u.copy(), pred_p, param_name, params,
            (tu * sgn, tp * sgn), (pred_u, pred_p), wu, tol,
        )
        if not ok:
            step *= 0.5
            easy = 0
            if step < ds_min:
                branch.failed = True
                break
            continue
        s += step
        k += 1
        easy += 1
        if easy >= 3 and step < ds_max:
            step = min(2.0 * step, ds_max)
            easy = 0
        # secant tangent for the next step
        du = unew - u
        dp = pnew - pval
        nrm = np.sqrt(wu * du @ du + dp * dp)
        tu, tp, sgn = du / nrm, dp / nrm, 1.0
        u, pval = unew, pnew
        params = params.updated(**{param_name: pval})
        bp = _make_point(model, fem, u, params, s)
        bp.tangent_param = tp
        branch.points.append(bp)
        prev, cur = branch.points[-2], branch.points[-1]
        if prev.tangent_param * cur.tangent_param < 0:
            branch.folds.append(0.5 * (prev.params[param_name] + cur.params[param_name]))
        if detect and cur.n_neg != prev.n_neg:
            branch.events.append((len(branch.points) - 2, len(branch.points) - 1))
    return branch


def detect_bifurcations(model, fem, branch, tol_param=1e-3):
    """Bisect every recorded eigenvalue-count crossing down to tol_param.

    Crossings that coincide with a fold (tangent direction reversal inside
    the bracket) are the fold itself, not a bifurcation, and are skipped.
    """
    events = []
    for i0, i1 in branch.events:
        bp0, bp1 = branch.points[i0], branch.points[i1]
        if bp0.tangent_param * bp1.tangent_param < 0:
            continue
        ev = _bisect_crossing(model, fem, branch.param_name, bp0, bp1, tol_param)
        if ev is not None:
            events.append(ev)
    return events


def _bisect_crossing(model, fem, param_name, bp0, bp1, tol_param):
    u_lo, p_lo, n_lo = bp0.u.copy(), bp0.params[param_name], bp0.n_neg
    u_hi, p_hi, n_hi = bp1.u.copy(), bp1.params[param_name], bp1.n_neg
    params = bp0.params
    while abs(p_hi - p_lo) > tol_param:
        p_mid = 0.5 * (p_lo + p_hi)
        pm = params.updated(**{param_name: p_mid})
        try:
            u_mid = newton_css(model, fem, 0.5 * (u_lo + u_hi), pm, tol=1e-10)
        except NoConvergenceError:
            return None
        mu, _ = generalized_spectrum(model, fem, u_mid, pm)
        n_mid = count_unstable(mu)
        if n_mid == n_lo:
            u_lo, p_lo = u_mid, p_mid
        else:
            u_hi, p_hi = u_mid, p_mid
    p_star = 0.5 * (p_lo + p_hi)
    ps = params.updated(**{param_name: p_star})
    u_star = newton_css(model, fem, 0.5 * (u_lo + u_hi), ps, tol=1e-10)
    mu, W = generalized_spectrum(model, fem, u_star, ps)
    # crossing eigenvalue: smallest |Re| among those that changed side
    idx = np.argmin(np.abs(mu.real))
    kind = "hopf" if abs(mu[idx].imag) > 1e-8 else "steady"
    vec = W[:, idx]
    return BifurcationEvent(
        param_name=param_name,
        param_value=p_star,
        kind=kind,
        u=u_star,
        params=ps,
        omega=abs(float(mu[idx].imag)),
        eigvec=vec,
        spatial_mode=_spatial_mode(model, fem, vec),
    )


def _spatial_mode(model, fem, vec, lmax=6):
    """Dominant Neumann cosine mode of the first state component."""
    if fem.mesh is None:
        return 0
    x = fem.mesh.nodes
    lx = 0.5 * fem.mesh.length
    comp = vec[: fem.n]
    best, score = 0, -1.0
    for l in range(lmax):
        phi = np.cos(l * np.pi * (x + lx) / (2.0 * lx))
        w = abs(np.sum(fem.M @ (comp * phi)))
        nrm = np.sum(fem.M @ (phi * phi))
        val = w / np.sqrt(nrm)
        if val > score:
            best, score = l, val
    return best


def branch_switch(model, fem, event, amplitude, kernel_gap=100.0):
    """Predictor on the branch bifurcating at a steady (real) crossing."""
    if event.kind != "steady":
        raise InvalidArgumentError(
            "branch switching handles steady bifurcations only; Hopf events "
            "seed periodic orbits instead"
        )
    mu, W = generalized_spectrum(model, fem, event.u, event.params)
    order = np.argsort(np.abs(mu.real))
    if len(mu) > 1 and np.abs(mu.real[order[1]]) < kernel_gap * max(np.abs(mu.real[order[0]]), 1e-14):
        if abs(mu[order[1]].imag) < 1e-8:  # genuine multiple real kernel
            raise InvalidArgumentError("kernel dimension != 1 at bifurcation point")
    phi = np.real(W[:, order[0]])
    phi = phi / np.max(np.abs(phi))
    return event.u + amplitude * phi


def corrected_branch_switch(model, fem, event, amplitude, tol=1e-10, max_iter=30):
    """Land on the bifurcating branch: predictor from branch_switch, then a
    bordered Newton with the amplitude fixed and the parameter free (fixed-b
    correction falls straight back onto the trivial branch at a pitchfork).

    Returns (u, params) on the bifurcating branch.
    """
    mu, W = generalized_spectrum(model, fem, event.u, event.params)
    k = int(np.argmin(np.abs(mu.real)))
    phi = np.real(W[:, k])
    phi = phi / np.max(np.abs(phi))
    wu = 1.0 / phi.size
    name = event.param_name
    u = event.u + amplitude * phi
    pval = event.param_value
    amp_rhs = amplitude * (wu * phi @ phi)
    for _ in range(max_iter):
        pc = event.params.updated(**{name: pval})
        g = residual_G(model, fem, u, pc)
        c = wu * phi @ (u - event.u) - amp_rhs
        if max(np.max(np.abs(g)), abs(c)) < tol:
            return u, pc
        A = jacobian_G(model, fem, u, pc).toarray()
        gp = _param_derivative(model, fem, u, pc, name)
        big = np.zeros((u.size + 1, u.size + 1))
        big[: u.size, : u.size] = A
        big[: u.size, -1] = gp
        big[-1, : u.size] = wu * phi
        try:
            dx = np.linalg.solve(big, -np.concatenate([g, [c]]))
        except np.linalg.LinAlgError:
            raise NoConvergenceError("bordered switch corrector: singular system")
        u = u + dx[:-1]
        pval = pval + dx[-1]
    raise NoConvergenceError("bordered switch corrector did not converge",
                             residual=float(np.max(np.abs(g))))


def css_target(model, fem, u_hat, params, res_tol=1e-8):
    """Saddle data at a CSS: defect, adjoint projection Psi, T suggestion.

    Solves the generalized adjoint problem dG^T Phi = Lambda M Phi; Psi rows
    are the mass-weighted realified adjoint eigenvectors of the flow-unstable
    side (Re Lambda < 0), row-orthonormalized by QR, so Psi annihilates the
    flow-stable eigenspace of dG.
    """
    g = residual_G(model, fem, u_hat, params)
    if np.max(np.abs(g)) > res_tol:
        raise InvalidArgumentError(
            f"css_target requires a converged CSS (|G| = {np.max(np.abs(g)):.2e})"
        )
    A = jacobian_G(model, fem, u_hat, params).toarray()
    B = _mass_full(model, fem)
    lam, Phi = sla.eig(A.T, B.T)
    order = np.argsort(lam.real)
    lam, Phi = lam[order], Phi[:, order]

    Nn = model.nstates * fem.n
    n_stable = int(np.sum(lam.real > _MARGINAL))  # decaying flow directions
    defect = Nn - n_stable
    if defect != 0:
        raise SaddlePointError(
            f"not a saddle point: defect {defect}", defect=defect
        )

    unst = np.where(lam.real < -_MARGINAL)[0]
    marginal = np.where(np.abs(lam.real) <= _MARGINAL)[0]
    if marginal.size:
        warnings.warn("marginal adjoint eigenvalues counted as flow-stable")
    rows = []
    seen_pair = set()
    for i in unst:
        if lam[i].imag > 1e-12:
            continue  # keep one member of each conjugate pair
        if lam[i].imag < -1e-12:
            key = (round(lam[i].real, 12), round(abs(lam[i].imag), 12))
            if key in seen_pair:
                continue
            seen_pair.add(key)
            w = B.T @ Phi[:, i]
            rows.append(np.real(w))
            rows.append(np.imag(w))
        else:
            rows.append(np.real(B.T @ Phi[:, i]))
    R = np.array(rows)
    if R.shape[0] != Nn:
        raise SaddlePointError(
            f"adjoint basis has {R.shape[0]} rows, expected {Nn}", defect=defect
        )
    Q, _ = np.linalg.qr(R.T)
    Psi = Q[:, :Nn].T

    # direct spectrum for T suggestion and reporting
    mu, _ = generalized_spectrum(model, fem, u_hat, params)
    pos = mu[mu.real > _MARGINAL]
    if pos.size == 0:
        raise SaddlePointError("no decaying direction available for T estimate")
    mu2 = pos[np.argmin(pos.real)]
    return CssTarget(
        u_hat=np.asarray(u_hat, float).copy(),
        params=params,
        defect=defect,
        Psi=Psi,
        spectrum=mu,
        T_suggest=float(1.0 / mu2.real),
        nstates=model.nstates,
    )
