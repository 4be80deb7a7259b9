"""Canonical periodic states: Hopf switching, periodic collocation Newton,
parameter continuation, Floquet multipliers, and saddle projections.

Orbits are stored on a time mesh on [0, 1] (rescaled by the period T_p) with
the last snapshot aliasing the first. The rescaled system M u' = -T_p G(u)
is discretized by the trapezoidal rule and closed by an integral phase
condition against the reference orbit's time derivative.
"""

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (
    DegenerateOrbitError,
    InvalidArgumentError,
    NoConvergenceError,
    SaddlePointError,
)
from .models import current_value, jacobian_G, residual_G
from .pschur import periodic_schur

TOLFLOQ = 1e-8  # warning threshold for the trivial multiplier


@dataclass
class CpsOrbit:
    t_mesh: np.ndarray     # (m_p,) increasing, t[0] = 0, t[-1] = 1
    u: np.ndarray          # (m_p, n_u), u[-1] aliases u[0]
    T_p: float
    params: object

    @property
    def m(self):
        return self.t_mesh.size

    @property
    def n_u(self):
        return self.u.shape[1]

    def amplitude(self):
        return float(np.max(np.abs(self.u - self.u.mean(axis=0))))

    def at_time(self, t):
        """Linear interpolation on the periodic mesh (t in units of T_p)."""
        scalar = np.ndim(t) == 0
        tq = np.mod(np.atleast_1d(np.asarray(t, dtype=float)), 1.0)
        out = np.empty((tq.size, self.n_u))
        for c in range(self.n_u):
            out[:, c] = np.interp(tq, self.t_mesh, self.u[:, c])
        return out[0] if scalar else out


@dataclass
class CpsTarget:
    orbit: CpsOrbit
    anchor_index: int
    multipliers: np.ndarray   # complex, sorted by |gamma| descending
    log_abs: np.ndarray
    P: np.ndarray             # (n_u/2 + 1, n_u) real rows
    defect: int

    @property
    def u_hat0(self):
        return self.orbit.u[self.anchor_index]


def _mass_full(model, fem):
    return np.kron(np.eye(2 * model.nstates), fem.M.toarray())


def _mass_sparse(model, fem):
    return sp.kron(sp.eye(2 * model.nstates), fem.M, format="csr")


def _phase_data(orbit):
    """Cyclic derivative of the reference orbit and trapezoid weights on the
    reduced point set (the aliased last point dropped)."""
    t = orbit.t_mesh
    U = orbit.u[:-1]
    M = U.shape[0]
    h = np.diff(t)
    udot = np.empty_like(U)
    w = np.empty(M)
    for j in range(M):
        hm = h[(j - 1) % len(h)]
        hp = h[j % len(h)]
        udot[j] = (U[(j + 1) % M] - U[(j - 1) % M]) / (hm + hp)
        w[j] = 0.5 * (hm + hp)
    return udot, w


def _assemble_cps(model, fem, t, U, Tp, params, phase_row, phase_rhs):
    """Residual and sparse Jacobian of the periodic trapezoidal system.

    U holds the (m-1) distinct snapshots; unknown layout: U.ravel(), then T_p.
    """
    nred, n_u = U.shape
    h = np.diff(t)
    Msp = _mass_sparse(model, fem)

    G = np.empty((nred, n_u))
    for j in range(nred):
        G[j] = residual_G(model, fem, U[j], params)

    res = np.empty(nred * n_u + 1)
    for j in range(nred):
        jp = (j + 1) % nred
        res[j * n_u:(j + 1) * n_u] = (
            Msp @ (U[jp] - U[j]) / h[j] + 0.5 * Tp * (G[j] + G[jp])
        )
    res[nred * n_u] = phase_row @ U.ravel() - phase_rhs

    coo_r, coo_c, coo_v = [], [], []

    def put(bi, bj, mat):
        mco = mat.tocoo()
        coo_r.append(mco.row + bi * n_u)
        coo_c.append(mco.col + bj * n_u)
        coo_v.append(mco.data)

    Gu = [jacobian_G(model, fem, U[j], params) for j in range(nred)]
    for j in range(nred):
        jp = (j + 1) % nred
        put(j, j, -Msp / h[j] + 0.5 * Tp * Gu[j])
        put(j, jp, Msp / h[j] + 0.5 * Tp * Gu[jp])
    coo_r.append(np.full(nred * n_u, nred * n_u))
    coo_c.append(np.arange(nred * n_u))
    coo_v.append(phase_row)
    tcol = np.empty(nred * n_u + 1)
    for j in range(nred):
        jp = (j + 1) % nred
        tcol[j * n_u:(j + 1) * n_u] = 0.5 * (G[j] + G[jp])
    tcol[-1] = 0.0
    coo_r.append(np.arange(nred * n_u + 1))
    coo_c.append(np.full(nred * n_u + 1, nred * n_u))
    coo_v.append(tcol)

    J = sp.coo_matrix(
        (np.concatenate(coo_v), (np.concatenate(coo_r), np.concatenate(coo_c))),
        shape=(nred * n_u + 1, nred * n_u + 1),
    ).tocsc()
    return res, J


def cps_newton(model, fem, guess, params=None, tol=1e-8, max_iter=20,
               min_amplitude=1e-8):
    """Correct a periodic-orbit guess: trapezoidal collocation with unknown
    period, closed by the integral phase condition against the guess."""
    if params is None:
        params = guess.params
    if guess.m < 20:
        raise InvalidArgumentError("periodic mesh needs at least 20 points")
    if guess.amplitude() < min_amplitude:
        raise DegenerateOrbitError(
            "guess has no oscillation (collapsed onto a steady state)")
    t = guess.t_mesh
    U = guess.u.copy()
    Tp = float(guess.T_p)
    n_u = U.shape[1]
    nred = guess.m - 1

    udot, w = _phase_data(guess)
    phase_row = (udot * w[:, None]).ravel() / n_u
    phase_rhs = float(phase_row @ guess.u[:-1].ravel())

    res = np.array([np.inf])
    for _ in range(max_iter):
        res, J = _assemble_cps(model, fem, t, U[:-1], Tp, params,
                               phase_row, phase_rhs)
        rmax = float(np.max(np.abs(res)))
        if rmax < tol:
            orbit = CpsOrbit(t_mesh=t.copy(), u=U, T_p=Tp, params=params)
            if orbit.amplitude() < min_amplitude:
                raise DegenerateOrbitError("orbit collapsed onto a steady state")
            return orbit
        try:
            dx = spla.spsolve(J, -res)
        except RuntimeError as exc:
            raise NoConvergenceError(f"periodic solve failed: {exc}", residual=rmax)
        U[:-1] += dx[: nred * n_u].reshape(nred, n_u)
        Tp += dx[nred * n_u]
        U[-1] = U[0]
        if not np.all(np.isfinite(U)) or not np.isfinite(Tp) or Tp <= 0:
            raise NoConvergenceError("periodic Newton diverged", residual=rmax)
    raise NoConvergenceError(
        f"periodic Newton: no convergence in {max_iter} steps",
        residual=float(np.max(np.abs(res))),
    )


def cps_from_hopf(model, fem, event, amplitude, m_mesh=61):
    """Initial orbit guess at a Hopf point: harmonic wave along the critical
    eigenvector with period 2 pi / omega_H."""
    if event.kind != "hopf":
        raise InvalidArgumentError("periodic switching needs a hopf-kind event")
    if event.omega <= 0:
        raise InvalidArgumentError("hopf event carries no frequency")
    phi = event.eigvec / np.max(np.abs(event.eigvec))
    t = np.linspace(0.0, 1.0, m_mesh)
    wave = np.exp(2j * np.pi * t)[:, None] * phi[None, :]
    U = event.u[None, :] + amplitude * np.real(wave)
    U[-1] = U[0]
    return CpsOrbit(t_mesh=t, u=U, T_p=2 * np.pi / event.omega, params=event.params)


def cps_switch(model, fem, event, amplitude, m_mesh=61, tol=1e-8, max_iter=30):
    """Land on the periodic branch emanating from a Hopf point.

    Solves the periodic system with the orbit amplitude pinned and the
    bifurcation parameter free; a fixed-parameter correction of the harmonic
    guess collapses onto the CSS."""
    guess = cps_from_hopf(model, fem, event, amplitude, m_mesh)
    name = event.param_name
    t = guess.t_mesh
    U = guess.u.copy()
    Tp = float(guess.T_p)
    n_u = U.shape[1]
    nred = guess.m - 1
    nu_tot = nred * n_u
    udot, w = _phase_data(guess)
    phase_row = (udot * w[:, None]).ravel() / n_u
    phase_rhs = float(phase_row @ guess.u[:-1].ravel())
    q = np.real(event.eigvec / np.max(np.abs(event.eigvec)))
    amp_rhs = float(q @ (guess.u[0] - event.u)) / n_u
    pval = event.param_value

    rmax = np.inf
    for _ in range(max_iter):
        params = event.params.updated(**{name: pval})
        res, J = _assemble_cps(model, fem, t, U[:-1], Tp, params,
                               phase_row, phase_rhs)
        amp_res = float(q @ (U[0] - event.u)) / n_u - amp_rhs
        full = np.concatenate([res, [amp_res]])
        rmax = float(np.max(np.abs(full)))
        if rmax < tol:
            orbit = CpsOrbit(t_mesh=t.copy(), u=U, T_p=Tp, params=params)
            if orbit.amplitude() < 1e-8:
                raise DegenerateOrbitError("hopf switch collapsed onto the CSS")
            return orbit
        hp = 1e-6 * (1.0 + abs(pval))
        rp, _ = _assemble_cps(model, fem, t, U[:-1], Tp,
                              event.params.updated(**{name: pval + hp}),
                              phase_row, phase_rhs)
        rm, _ = _assemble_cps(model, fem, t, U[:-1], Tp,
                              event.params.updated(**{name: pval - hp}),
                              phase_row, phase_rhs)
        pcol = (rp - rm) / (2 * hp)
        arow = np.zeros(nu_tot + 2)
        arow[:n_u] = q / n_u
        big = sp.bmat(
            [[J, pcol[:, None]], [sp.coo_matrix(arow[None, :-1]),
                                  sp.coo_matrix([[0.0]])]],
            format="csc",
        )
        dx = spla.spsolve(big, -full)
        U[:-1] += dx[:nu_tot].reshape(nred, n_u)
        Tp += dx[nu_tot]
        pval += dx[nu_tot + 1]
        U[-1] = U[0]
        if not np.all(np.isfinite(U)) or Tp <= 0:
            raise NoConvergenceError("hopf switch diverged", residual=rmax)
    raise NoConvergenceError("hopf switch did not converge", residual=rmax)


def cps_continue(model, fem, orbit, param_name, ds, n_steps, tol=1e-8,
                 ds_min=None, ds_max=None):
    """Arclength continuation of a periodic orbit in one parameter.

    The phase condition is re-anchored at each accepted orbit. Returns
    (orbits, info) with fold parameter estimates and a failure flag.
    """
    if ds == 0:
        raise InvalidArgumentError("continuation stepsize ds must be nonzero")
    info = {"folds": [], "failed": False}
    if n_steps == 0:
        return [orbit], info
    if ds_min is None:
        ds_min = abs(ds) / 64.0
    if ds_max is None:
        ds_max = 4.0 * abs(ds)

    t = orbit.t_mesh
    n_u = orbit.n_u
    nred = orbit.m - 1
    nu_tot = nred * n_u
    wu = 1.0 / nu_tot

    def metric_norm(vec):
        return np.sqrt(wu * vec[:nu_tot] @ vec[:nu_tot]
                       + vec[nu_tot] ** 2 + vec[nu_tot + 1] ** 2)

    orbits = [orbit]
    p0 = orbit.params[param_name]

    udot, w = _phase_data(orbit)
    phase_row = (udot * w[:, None]).ravel() / n_u
    phase_rhs = float(phase_row @ orbit.u[:-1].ravel())
    _, J0 = _assemble_cps(model, fem, t, orbit.u[:-1], orbit.T_p,
                          orbit.params, phase_row, phase_rhs)
    hp = 1e-6 * (1.0 + abs(p0))
    rp, _ = _assemble_cps(model, fem, t, orbit.u[:-1], orbit.T_p,
                          orbit.params.updated(**{param_name: p0 + hp}),
                          phase_row, phase_rhs)
    rm, _ = _assemble_cps(model, fem, t, orbit.u[:-1], orbit.T_p,
                          orbit.params.updated(**{param_name: p0 - hp}),
                          phase_row, phase_rhs)
    dxdp = spla.spsolve(J0, -(rp - rm) / (2 * hp))
    tau = np.concatenate([dxdp, [1.0]])
    tau = np.sign(ds) * tau / metric_norm(tau)

    cur = np.concatenate([orbit.u[:-1].ravel(), [orbit.T_p, p0]])
    step = abs(ds)
    easy = 0
    k = 0
    while k < n_steps:
        pred = cur + step * tau
        ref = orbits[-1]
        udot, w = _phase_data(ref)
        phase_row = (udot * w[:, None]).ravel() / n_u
        phase_rhs = float(phase_row @ ref.u[:-1].ravel())
        x = pred.copy()
        ok = False
        for _ in range(12):
            Unew = x[:nu_tot].reshape(nred, n_u)
            Tnew, pnew = x[nu_tot], x[nu_tot + 1]
            params = ref.params.updated(**{param_name: pnew})
            res, J = _assemble_cps(model, fem, t, Unew, Tnew, params,
                                   phase_row, phase_rhs)
            darc = x - pred
            arc = (wu * tau[:nu_tot] @ darc[:nu_tot]
                   + tau[nu_tot] * darc[nu_tot]
                   + tau[nu_tot + 1] * darc[nu_tot + 1])
            full = np.concatenate([res, [arc]])
            if np.max(np.abs(full)) < tol:
                ok = True
                break
            hp = 1e-6 * (1.0 + abs(pnew))
            rp, _ = _assemble_cps(model, fem, t, Unew, Tnew,
                                  ref.params.updated(**{param_name: pnew + hp}),
                                  phase_row, phase_rhs)
            rm, _ = _assemble_cps(model, fem, t, Unew, Tnew,
                                  ref.params.updated(**{param_name: pnew - hp}),
                                  phase_row, phase_rhs)
            pcol = (rp - rm) / (2 * hp)
            arow = np.zeros(nu_tot + 2)
            arow[:nu_tot] = wu * tau[:nu_tot]
            arow[nu_tot] = tau[nu_tot]
            arow[nu_tot + 1] = tau[nu_tot + 1]
            big = sp.bmat(
                [[J, pcol[:, None]],
                 [sp.coo_matrix(arow[None, :-1]), sp.coo_matrix([[arow[-1]]])]],
                format="csc",
            )
            try:
                dx = spla.spsolve(big, -full)
            except RuntimeError:
                break
            x = x + dx
            if not np.all(np.isfinite(x)) or x[nu_tot] <= 0:
                break
        if not ok:
            step *= 0.5
            easy = 0
            if step < ds_min:
                info["failed"] = True
                break
            continue
        Ufull = np.vstack([x[:nu_tot].reshape(nred, n_u),
                           x[:n_u][None, :]])
        new_orbit = CpsOrbit(t_mesh=t.copy(), u=Ufull, T_p=float(x[nu_tot]),
                             params=ref.params.updated(
                                 **{param_name: float(x[nu_tot + 1])}))
        dvec = x - cur
        tau_new = dvec / metric_norm(dvec)
        if tau[nu_tot + 1] * tau_new[nu_tot + 1] < 0:
            info["folds"].append(0.5 * (cur[nu_tot + 1] + x[nu_tot + 1]))
        tau = tau_new
        cur = x
        orbits.append(new_orbit)
        k += 1
        easy += 1
        if easy >= 3 and step < ds_max:
            step = min(2 * step, ds_max)
            easy = 0
    return orbits, info


def transition_factors(model, fem, orbit):
    """Trapezoidal one-step transition matrices of the variational flow."""
    t = orbit.t_mesh
    Tp = orbit.T_p
    n_u = orbit.n_u
    Mf = _mass_full(model, fem)
    Gu = [jacobian_G(model, fem, orbit.u[j], orbit.params).toarray()
          for j in range(orbit.m)]
    A = np.empty((orbit.m - 1, n_u, n_u))
    h = np.diff(t)
    for j in range(orbit.m - 1):
        lhs = Mf + 0.5 * h[j] * Tp * Gu[j + 1]
        rhs = Mf - 0.5 * h[j] * Tp * Gu[j]
        try:
            A[j] = np.linalg.solve(lhs, rhs)
        except np.linalg.LinAlgError:
            raise NoConvergenceError(f"singular transition factor at step {j}")
    return A


@dataclass
class FloquetData:
    multipliers: np.ndarray
    log_abs: np.ndarray
    Z0: np.ndarray  # leading columns span dominant invariant subspaces


def floquet(model, fem, orbit):
    """Floquet multipliers via periodic Schur of the transition factors,
    sorted by |gamma| descending; the monodromy product is never formed."""
    A = transition_factors(model, fem, orbit)
    ps = periodic_schur(A, sort=True)
    _check_trivial(ps.log_abs)
    return FloquetData(multipliers=ps.gamma, log_abs=ps.log_abs, Z0=ps.Z0)


def _check_trivial(log_abs):
    dev = np.min(np.abs(np.exp(np.clip(log_abs, -50, 50)) - 1.0))
    if dev > TOLFLOQ:
        warnings.warn(
            f"trivial Floquet multiplier off by {dev:.2e} (> {TOLFLOQ}); "
            "refine the orbit mesh"
        )
    return dev


def cps_target(model, fem, orbit, anchor_index=0, unit_tol=1e-6):
    """Saddle data of a periodic orbit at an anchor point.

    P rows form an orthonormal real basis of the adjoint monodromy's
    invariant subspace for |gamma| >= 1 (the trivial multiplier included,
    which pins the anchor phase), from the periodic Schur of the reversed
    transposed factor cycle. The factors are those already computed for the
    direct problem, so the adjoint costs no new linearizations.
    """
    m1 = orbit.m - 1
    if not 0 <= anchor_index < m1:
        raise InvalidArgumentError(f"anchor index must be in [0, {m1})")
    A = transition_factors(model, fem, orbit)
    rolled = np.roll(A, -anchor_index, axis=0)
    adj = np.ascontiguousarray(rolled[::-1].transpose(0, 2, 1))
    ps = periodic_schur(adj, sort=True)
    _check_trivial(ps.log_abs)

    n_u = orbit.n_u
    Nn = n_u // 2
    thresh = np.log1p(-unit_tol)
    n_cu = int(np.sum(ps.log_abs >= thresh))
    defect = Nn - 1 - int(np.sum(ps.log_abs < thresh))
    if n_cu != Nn + 1:
        raise SaddlePointError(
            f"periodic target violates the saddle-point property "
            f"(center-unstable dimension {n_cu}, need {Nn + 1})",
            defect=defect,
        )
    Q = ps.Z0[:, :n_cu]
    X = np.hstack([Q.real, Q.imag])
    Uv, sv, _ = np.linalg.svd(X, full_matrices=False)
    rank = int(np.sum(sv > 1e-10 * sv[0]))
    if rank != n_cu:
        raise SaddlePointError(
            f"adjoint subspace realification has rank {rank}, need {n_cu}")
    P = Uv[:, :n_cu].T
    return CpsTarget(
        orbit=orbit,
        anchor_index=anchor_index,
        multipliers=ps.gamma,
        log_abs=ps.log_abs,
        P=P,
        defect=defect,
    )


def cps_value(model, fem, orbit, phase=0.0):
    """Discounted value of the periodic state at a given phase (orbit time
    units): (1 - e^{-rho T_p})^{-1} int_0^{T_p} e^{-rho t} J_ca(u(t+phase)) dt."""
    rho = orbit.params.rho
    if rho <= 0:
        raise InvalidArgumentError("discounted value needs rho > 0")
    Tp = orbit.T_p
    t = orbit.t_mesh
    jca = np.empty(orbit.m)
    for j in range(orbit.m):
        u = orbit.at_time(t[j] + phase / Tp)
        jca[j] = current_value(model, fem, u, orbit.params)
    integrand = np.exp(-rho * Tp * t) * jca
    integral = Tp * np.trapezoid(integrand, t)
    return float(integral / (1.0 - np.exp(-rho * Tp)))


def cps_refine(model, fem, orbit, m_new, tol=1e-10):
    """Re-solve the orbit on a finer uniform mesh (guess by interpolation)."""
    t_new = np.linspace(0.0, 1.0, m_new)
    U_new = orbit.at_time(t_new)
    U_new[-1] = U_new[0]
    guess = CpsOrbit(t_mesh=t_new, u=U_new, T_p=orbit.T_p, params=orbit.params)
    return cps_newton(model, fem, guess, tol=tol)
