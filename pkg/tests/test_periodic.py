import numpy as np
import pytest
import scipy.linalg as sla

from occ.errors import DegenerateOrbitError, InvalidArgumentError
from occ.fem1d import ode_operators
from occ.models import get_model, pollution_flat_css, toy_analytics
from occ.periodic import (
    CpsOrbit,
    cps_continue,
    cps_from_hopf,
    cps_newton,
    cps_refine,
    cps_switch,
    cps_target,
    cps_value,
    floquet,
    transition_factors,
)
from occ.pschur import periodic_schur
from occ.steady import _make_point, continue_css, detect_bifurcations

FEM = ode_operators()
TOY = get_model("toy")
TOY_P = TOY.default_params()
ANA = toy_analytics(TOY_P)


def toy_orbit(m):
    t = np.linspace(0.0, 1.0, m)
    guess = CpsOrbit(t_mesh=t, u=ANA["orbit"](t), T_p=ANA["period"],
                     params=TOY_P)
    return cps_newton(TOY, FEM, guess, tol=1e-12)


def discrete_period(m):
    # the sampled circle solves the trapezoidal system exactly with the
    # rotation-adjusted period 2 (m-1) tan(pi / (m-1))
    return 2.0 * (m - 1) * np.tan(np.pi / (m - 1))


def test_toy_analytic_orbit_zero_correction():
    m = 101
    t = np.linspace(0.0, 1.0, m)
    U = ANA["orbit"](t)
    orb = cps_newton(TOY, FEM, CpsOrbit(t_mesh=t, u=U, T_p=2 * np.pi,
                                        params=TOY_P), tol=1e-12)
    assert np.max(np.abs(orb.u - U)) < 1e-12
    assert abs(orb.T_p - discrete_period(m)) < 1e-10


def test_toy_period_converges_second_order():
    errs = [abs(toy_orbit(m).T_p - 2 * np.pi) for m in (51, 101, 201)]
    assert errs[0] / errs[1] > 3.5
    assert errs[1] / errs[2] > 3.5


def test_cps_newton_rejects_constant_guess():
    m = 41
    t = np.linspace(0.0, 1.0, m)
    U = np.tile([1.0, 0.0, 1.0, 0.0], (m, 1))
    with pytest.raises(DegenerateOrbitError):
        cps_newton(TOY, FEM, CpsOrbit(t_mesh=t, u=U, T_p=2 * np.pi,
                                      params=TOY_P))


def test_cps_newton_rejects_coarse_mesh():
    t = np.linspace(0.0, 1.0, 10)
    with pytest.raises(InvalidArgumentError):
        cps_newton(TOY, FEM, CpsOrbit(t_mesh=t, u=ANA["orbit"](t),
                                      T_p=2 * np.pi, params=TOY_P))


def test_floquet_toy_against_analytics():
    orb = toy_orbit(201)
    fl = floquet(TOY, FEM, cps_refine(TOY, FEM, orb, 400))
    mags = np.sort(np.abs(fl.multipliers))
    exact = np.sort(ANA["multipliers"])
    # trivial multiplier essentially exact on the discrete orbit
    assert np.min(np.abs(mags - 1.0)) < 1e-10
    assert abs(mags[0] - exact[0]) < 1e-9          # gamma_2, absolute
    assert abs(mags[2] / exact[2] - 1.0) < 5e-3    # large ones, scheme-limited
    assert abs(mags[3] / exact[3] - 1.0) < 5e-3


def test_floquet_slow_regime():
    p = TOY.default_params(omega=0.04)
    ana = toy_analytics(p)
    t = np.linspace(0.0, 1.0, 201)
    orb = cps_newton(TOY, FEM, CpsOrbit(t_mesh=t, u=ana["orbit"](t),
                                        T_p=ana["period"], params=p))
    fl = floquet(TOY, FEM, cps_refine(TOY, FEM, orb, 400))
    mags = np.abs(fl.multipliers)
    gamma2 = np.max(mags[mags < 1 - 1e-6])  # leading stable multiplier
    assert abs(gamma2 - 0.5325) < 0.02


def test_trivial_multiplier_tolfloq():
    for m in (200, 400):
        orb = toy_orbit(m)
        fl = floquet(TOY, FEM, orb)
        assert np.min(np.abs(np.exp(fl.log_abs) - 1.0)) < 1e-8


def test_cps_target_matches_analytic_projection():
    # discretization error in the subspace is O(h^2); use a fine mesh for
    # the 1e-6 comparison against the closed-form projection
    orb = toy_orbit(2001)
    tgt = cps_target(TOY, FEM, orb, anchor_index=0)
    assert tgt.defect == 0
    Mc = sla.expm(ANA["var_polar"] * orb.T_p)  # polar chart = cartesian at anchor
    w, V = np.linalg.eig(Mc.T)
    Q = V[:, np.abs(w) >= 1 - 1e-6]
    X = np.hstack([Q.real, Q.imag])
    u_, s_, _ = np.linalg.svd(X, full_matrices=False)
    Pana = u_[:, :3].T
    cosines = np.linalg.svd(tgt.P @ Pana.T)[1]
    assert np.all(1.0 - cosines < 1e-6)
    # the analytic stable direction is annihilated
    mu_s = -np.sqrt(2 * np.pi)
    ws = np.array([1.0 / (mu_s - 2.0), 0.0, 1.0, mu_s])
    ws /= np.linalg.norm(ws)
    assert np.linalg.norm(tgt.P @ ws) < 1e-6


def test_cps_target_annihilates_discrete_stable_subspace():
    orb = toy_orbit(201)
    tgt = cps_target(TOY, FEM, orb, anchor_index=0)
    A = transition_factors(TOY, FEM, orb)
    ps = periodic_schur(A, sort="asc")
    n_stable = int(np.sum(ps.log_abs < -1e-6))
    S = ps.Z0[:, :n_stable]
    assert np.max(np.abs(tgt.P @ S)) < 1e-6


def test_anchor_shift_keeps_multipliers():
    orb = toy_orbit(101)
    t0 = cps_target(TOY, FEM, orb, anchor_index=0)
    t1 = cps_target(TOY, FEM, orb, anchor_index=50)
    la0 = np.sort(t0.log_abs)
    la1 = np.sort(t1.log_abs)
    moderate = np.abs(la0) < 18
    assert np.max(np.abs(np.exp(la1[moderate]) / np.exp(la0[moderate]) - 1)) < 1e-8
    assert np.max(np.abs(la0 - la1)) < 1e-6
    # but the projection row space moves with the anchor
    cosines = np.linalg.svd(t0.P @ t1.P.T)[1]
    assert np.min(cosines) < 0.99


def test_cps_continue_tracks_period_in_theta():
    orb = toy_orbit(61)
    orbits, info = cps_continue(TOY, FEM, orb, "theta", ds=0.3, n_steps=6)
    assert not info["failed"]
    disc = discrete_period(61)
    for o in orbits:
        th = o.params["theta"]
        # the discrete period satisfies T_p * theta = const exactly; the
        # distance to 2 pi / theta is the O(h^2) mesh bias (~5.7e-3 at m=61)
        assert abs(o.T_p * th - disc) < 1e-8
        assert abs(o.T_p - 2 * np.pi / th) * th < 1e-2


def test_cps_continue_zero_steps():
    orb = toy_orbit(61)
    orbits, info = cps_continue(TOY, FEM, orb, "theta", ds=0.1, n_steps=0)
    assert orbits == [orb]


def test_cps_value_constant_current_value():
    # spatially and temporally constant J_ca = c integrates to c / rho
    model = get_model("pollution-ode")
    p = model.default_params(rho=0.5)
    u_star = pollution_flat_css(p)
    m = 101
    t = np.linspace(0.0, 1.0, m)
    orb = CpsOrbit(t_mesh=t, u=np.tile(u_star, (m, 1)), T_p=37.0, params=p)
    from occ.models import current_value
    from occ.fem1d import ode_operators

    c = current_value(model, ode_operators(), u_star, p)
    exact = c / p.rho
    # the geometric-series identity holds up to quadrature error O((rho Tp/m)^2)
    quad = (p.rho * orb.T_p / orb.m) ** 2 * abs(exact)
    for phase in (0.0, 9.3, 18.5):
        J = cps_value(model, ode_operators(), orb, phase=phase)
        assert abs(J - exact) < quad
    # and the error contracts at second order under mesh refinement
    orb2 = CpsOrbit(t_mesh=np.linspace(0, 1, 2 * orb.m - 1),
                    u=np.tile(u_star, (2 * orb.m - 1, 1)), T_p=orb.T_p,
                    params=p)
    e1 = abs(cps_value(model, ode_operators(), orb, phase=0.0) - exact)
    e2 = abs(cps_value(model, ode_operators(), orb2, phase=0.0) - exact)
    assert e1 / e2 > 3.5


def test_phase_condition_holds_at_convergence():
    m = 101
    t = np.linspace(0.0, 1.0, m)
    guess = CpsOrbit(t_mesh=t, u=ANA["orbit"](t) + 1e-3, T_p=2 * np.pi,
                     params=TOY_P)
    orb = cps_newton(TOY, FEM, guess, tol=1e-10)
    from occ.periodic import _phase_data

    udot, w = _phase_data(guess)
    row = (udot * w[:, None]).ravel() / orb.n_u
    resid = row @ (orb.u[:-1] - guess.u[:-1]).ravel()
    assert abs(resid) < 1e-10


def test_hopf_switch_pollution_ode():
    model = get_model("pollution-ode")
    p = model.default_params(rho=0.55)
    u0 = pollution_flat_css(p)
    br = continue_css(model, FEM, _make_point(model, FEM, u0, p, 0.0), "rho",
                      ds=0.01, n_steps=12)
    hopf = [e for e in detect_bifurcations(model, FEM, br)
            if e.kind == "hopf"]
    assert len(hopf) == 1
    ev = hopf[0]
    assert 0.57 <= ev.param_value <= 0.59
    orbit = cps_switch(model, FEM, ev, amplitude=0.02, m_mesh=61)
    assert orbit.amplitude() > 0.005
    assert 20 < orbit.T_p < 60
    # zero-amplitude guess collapses onto the steady state
    with pytest.raises(DegenerateOrbitError):
        cps_newton(model, FEM, cps_from_hopf(model, FEM, ev, 0.0))


def test_cps_from_hopf_rejects_steady_event():
    model = get_model("pollution-ode")
    ev_like = type("E", (), {"kind": "steady"})()
    with pytest.raises(InvalidArgumentError):
        cps_from_hopf(model, FEM, ev_like, 0.1)
