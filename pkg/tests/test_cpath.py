import numpy as np
import pytest
from tests_helpers import LinearSaddle

from occ.cpath import (
    CanonicalPath,
    CpSettings,
    arc_step,
    constant_path,
    extend_T_cps,
    free_T_policy,
    init_T,
    isc,
    solve_cp_bvp,
    tiled_cps_path,
)
from occ.errors import InvalidArgumentError, NoConvergenceError, SaddlePointError
from occ.fem1d import ode_operators
from occ.models import get_model, pollution_flat_css, toy_analytics
from occ.periodic import CpsOrbit, cps_newton, cps_target
from occ.steady import css_target
from occ.value import deviation, path_value

FEM = ode_operators()
TOY = get_model("toy")
TOY_P = TOY.default_params()
ANA = toy_analytics(TOY_P)
LIN = LinearSaddle()
LIN_P = LIN.default_params()
LIN_TARGET = css_target(LIN, FEM, np.zeros(2), LIN_P)


def toy_cps_target(m=61, anchor=0):
    t = np.linspace(0.0, 1.0, m)
    orb = cps_newton(TOY, FEM, CpsOrbit(t_mesh=t, u=ANA["orbit"](t),
                                        T_p=ANA["period"], params=TOY_P))
    return cps_target(TOY, FEM, orb, anchor_index=anchor)


def test_init_T_rules():
    assert np.isclose(init_T(LIN_TARGET, CpSettings()), 1.0)  # 1 / Re mu_2
    tgt = toy_cps_target()
    T = init_T(tgt, CpSettings(nTp=2))
    assert np.isclose(T, 2 * tgt.orbit.T_p)
    assert init_T(tgt, CpSettings(T=100.0)) == 100.0


def test_linear_path_second_order_convergence():
    # exact solution v(t) = exp(-T t): trapezoidal endpoint error is O(m^-2)
    T = 1.0
    errs = []
    for m in (20, 40, 80, 160):
        settings = CpSettings(nti=m, tol=1e-13)
        guess = constant_path(LIN_TARGET, T, settings)
        path, _ = solve_cp_bvp(LIN, FEM, LIN_TARGET, np.array([1.0]), guess,
                               T, freeT=False, settings=settings)
        errs.append(abs(path.u[-1, 0] - np.exp(-T)))
    rates = [errs[i] / errs[i + 1] for i in range(3)]
    assert all(r > 3.5 for r in rates), (errs, rates)


def test_projection_residual_enforced():
    settings = CpSettings(nti=41)
    guess = constant_path(LIN_TARGET, 1.0, settings)
    path, _ = solve_cp_bvp(LIN, FEM, LIN_TARGET, np.array([0.5]), guess, 1.0,
                           freeT=False, settings=settings)
    assert abs(LIN_TARGET.Psi @ (path.u[-1] - LIN_TARGET.u_hat)) < settings.tol


def test_solve_rejects_wrong_v0_length():
    settings = CpSettings(nti=21)
    guess = constant_path(LIN_TARGET, 1.0, settings)
    with pytest.raises(InvalidArgumentError):
        solve_cp_bvp(LIN, FEM, LIN_TARGET, np.array([1.0, 2.0]), guess, 1.0,
                     freeT=False, settings=settings)


def test_defect_mismatch_rejected():
    # a pollution CSS between the Hopf points carries defect 2
    model = get_model("pollution")
    from occ.fem1d import assemble_operators, build_mesh

    fem = assemble_operators(build_mesh(np.pi / 2, 20))
    p = model.default_params(rho=0.56)
    u56 = pollution_flat_css(p, n=fem.n)
    with pytest.raises(SaddlePointError):
        css_target(model, fem, u56, p)


def _fd_stacked_jacobian(model, fem, target, v0, path, T, alpha, settings,
                         freeT, arc=None):
    """Finite differences of the full stacked residual, borders included."""

    def full_res(U, Tv, av):
        g = CanonicalPath(t_mesh=path.t_mesh, u=U.copy(), T=Tv, alpha=av,
                          target_kind=path.target_kind, params=path.params)
        res, core, bcols, brows, brs, names = solve_cp_bvp(
            model, fem, target, v0, g, Tv, freeT=freeT, settings=settings,
            alpha=av, arc=arc, debug=True)
        return np.concatenate([res, brs]), core, bcols, brows, names

    r0, core, bcols, brows, names = full_res(path.u, T, alpha)
    nU = path.u.size
    cols = []
    hstep = 1e-6
    for k in range(nU):
        Up = path.u.copy().reshape(-1)
        Um = Up.copy()
        Up[k] += hstep
        Um[k] -= hstep
        rp, *_ = full_res(Up.reshape(path.u.shape), T, alpha)
        rm, *_ = full_res(Um.reshape(path.u.shape), T, alpha)
        cols.append((rp - rm) / (2 * hstep))
    extra = []
    if "T" in names:
        rp, *_ = full_res(path.u, T + hstep, alpha)
        rm, *_ = full_res(path.u, T - hstep, alpha)
        extra.append((rp - rm) / (2 * hstep))
    if "alpha" in names:
        rp, *_ = full_res(path.u, T, alpha + hstep)
        rm, *_ = full_res(path.u, T, alpha - hstep)
        extra.append((rp - rm) / (2 * hstep))
    Jfd = np.column_stack(cols + extra)

    nb = len(bcols)
    n_core = core.shape[0]
    Jas = np.zeros((n_core + nb, nU + nb))
    Jas[:n_core, :nU] = core.toarray()
    for j, col in enumerate(bcols):
        Jas[:n_core, nU + j] = col
    for i, row in enumerate(brows):
        Jas[n_core + i, :nU] = row
    # scalar border couplings
    for i, rname in enumerate(["proj"] * (1 if path.target_kind == "cps" else 0)
                              + (["eps"] if (freeT and path.target_kind == "css") else [])
                              + (["arc"] if arc is not None else [])):
        for j, cname in enumerate(names):
            if rname == "arc" and cname == "alpha":
                Jas[n_core + i, nU + j] = arc["s_alpha"]
    return Jfd, Jas


def test_stacked_jacobian_matches_finite_differences_cps():
    tgt = toy_cps_target(m=21)
    settings = CpSettings(nti=6, tol=1e-10)
    rng = np.random.default_rng(4)
    t = np.linspace(0, 1, 6)
    U = ANA["orbit"](t) + 0.05 * rng.standard_normal((6, 4))
    path = CanonicalPath(t_mesh=t, u=U, T=2 * np.pi, alpha=0.7,
                         target_kind="cps", params=TOY_P)
    Jfd, Jas = _fd_stacked_jacobian(TOY, FEM, tgt, U[0, :2], path, 2 * np.pi,
                                    0.7, settings, freeT=False)
    scale = max(1.0, np.max(np.abs(Jas)))
    assert np.max(np.abs(Jfd - Jas)) / scale < 1e-5


def test_stacked_jacobian_matches_finite_differences_css_arc():
    settings = CpSettings(nti=6, tol=1e-10, eps2=0.05)
    rng = np.random.default_rng(5)
    t = np.linspace(0, 1, 6)
    U = 0.3 * rng.standard_normal((6, 2))
    path = CanonicalPath(t_mesh=t, u=U, T=1.3, alpha=0.6, target_kind="css",
                         params=LIN_P)
    arc = {"s": np.array([0.2, 0.1]), "s_alpha": 0.8, "sigma": 0.05,
           "ref_u0": np.array([0.1, 0.0]), "ref_alpha": 0.55,
           "v0_star": np.array([1.0]), "v_hat": np.array([0.0])}
    Jfd, Jas = _fd_stacked_jacobian(LIN, FEM, LIN_TARGET, None, path, 1.3,
                                    0.6, settings, freeT=True, arc=arc)
    scale = max(1.0, np.max(np.abs(Jas)))
    assert np.max(np.abs(Jfd - Jas)) / scale < 1e-5


def test_homotopy_endpoint_identity():
    # alpha = 0 with the constant guess returns the constant path, and the
    # value matches the closed discounted integral of the steady current value
    model = get_model("pollution-ode")
    p = model.default_params(rho=0.55)
    from occ.steady import newton_css

    u_star = newton_css(model, FEM, pollution_flat_css(p), p)
    tgt = css_target(model, FEM, u_star, p)
    settings = CpSettings(nti=201, tol=1e-10, T=10.0)
    T = init_T(tgt, settings)
    guess = constant_path(tgt, T, settings)
    v_hat = u_star[:2]
    path, _ = solve_cp_bvp(model, FEM, tgt, v_hat, guess, T, freeT=False,
                           settings=settings, alpha=0.0)
    assert np.max(np.abs(path.u - u_star[None, :])) < settings.tol
    from occ.models import current_value

    jca = current_value(model, FEM, u_star, p)
    J = path_value(model, FEM, path)
    expect = jca * (1 - np.exp(-p.rho * T)) / p.rho
    quad = (p.rho * T / settings.nti) ** 2 * abs(expect)
    assert abs(J - expect) < quad


def test_isc_toy_reaches_alpha_one_and_conserves_energy():
    # the path mesh inherits the tiled orbit mesh; a 151-point orbit gives a
    # 301-point path, enough for the 1e-3 first-integral band
    tgt = toy_cps_target(m=151)
    settings = CpSettings(eps_inf=1e-2, nTp=2)
    path, hist = isc(TOY, FEM, tgt, np.array([4.0, 0.0]),
                     [0.25, 0.5, 0.75, 1.0], settings=settings)
    assert not hist.stalled
    assert hist.alphas[-1] == 1.0
    d_inf, _ = deviation(path, tgt.u_hat0)
    assert d_inf < 1e-4
    E = ANA["energy"](path.u[:, 2], path.u[:, 3])
    assert np.max(np.abs(E - 1.0 / (2 * np.pi))) < 1e-3
    assert np.allclose(path.u[0, :2], [4.0, 0.0], atol=1e-12)


def test_isc_alvin_validation():
    tgt = toy_cps_target()
    with pytest.raises(InvalidArgumentError):
        isc(TOY, FEM, tgt, np.array([4.0, 0.0]), [0.5, 0.25])
    with pytest.raises(InvalidArgumentError):
        isc(TOY, FEM, tgt, np.array([4.0, 0.0]), [0.0, 0.5])
    with pytest.raises(InvalidArgumentError):
        isc(TOY, FEM, tgt, np.array([4.0, 0.0]), [])


def test_extend_T_appends_periods_slow_regime():
    # omega = 0.04 contracts slowly; the period-append guard must kick in
    p = TOY.default_params(omega=0.04)
    ana = toy_analytics(p)
    t = np.linspace(0, 1, 61)
    orb = cps_newton(TOY, FEM, CpsOrbit(t_mesh=t, u=ana["orbit"](t),
                                        T_p=ana["period"], params=p))
    tgt = cps_target(TOY, FEM, orb, anchor_index=0)
    settings = CpSettings(eps_inf=1e-2, nTp=2)
    path, hist = isc(TOY, FEM, tgt, np.array([4.0, 0.0]),
                     [0.3, 0.5, 0.7, 1.0], settings=settings)
    assert not hist.stalled
    assert path.T > 2.5 * orb.T_p  # extensions happened
    d_inf, _ = deviation(path, tgt.u_hat0)
    assert d_inf <= settings.eps_inf


def test_extend_T_cap_errors():
    p = TOY.default_params(omega=0.04)
    ana = toy_analytics(p)
    t = np.linspace(0, 1, 61)
    orb = cps_newton(TOY, FEM, CpsOrbit(t_mesh=t, u=ana["orbit"](t),
                                        T_p=ana["period"], params=p))
    tgt = cps_target(TOY, FEM, orb, anchor_index=0)
    settings = CpSettings(eps_inf=1e-2, nTp=2)
    path, hist = isc(TOY, FEM, tgt, np.array([4.0, 0.0]), [0.3],
                     settings=settings)
    assert not hist.stalled
    # an unreachable deviation demand exhausts the period cap
    impossible = CpSettings(eps_inf=1e-13, nTp=2, T_cap_periods=3.0)
    with pytest.raises(NoConvergenceError):
        extend_T_cps(TOY, FEM, path, tgt, impossible)
    # inside isc the same failure surfaces as a stall, not a crash
    _, hist2 = isc(TOY, FEM, tgt, np.array([4.0, 0.0]), [0.3],
                   settings=impossible)
    assert hist2.stalled


def test_free_T_policy_steady():
    # exact endpoint deviation v0 e^{-T}: truncate early, then free T
    settings = CpSettings(nti=101, T=3.0, tol=1e-12)
    guess = constant_path(LIN_TARGET, 3.0, settings)
    path, _ = solve_cp_bvp(LIN, FEM, LIN_TARGET, np.array([1.0]), guess, 3.0,
                           freeT=False, settings=settings, alpha=1.0)
    dev0 = float(np.max(np.abs(path.u[-1] - LIN_TARGET.u_hat)))
    assert dev0 > 1e-2

    tight = CpSettings(nti=101, T=3.0, tol=1e-12, eps_inf=1e-3)
    path2, activated = free_T_policy(LIN, FEM, path, LIN_TARGET, tight)
    assert activated
    _, dev2 = deviation(path2, LIN_TARGET.u_hat)
    assert abs(dev2 - dev0 / 10.0) < 1e-9  # the 1/10 initialization rule
    assert path2.T > 3.0

    # a-posteriori tightening: smaller eps2 pulls the endpoint closer in
    devs, Ts = [dev2], [path2.T]
    for eps2 in (1e-3, 1e-4):
        tighter = CpSettings(nti=101, T=3.0, tol=1e-12, eps_inf=1e-3,
                             eps2=eps2)
        path2, _ = free_T_policy(LIN, FEM, path2, LIN_TARGET, tighter)
        _, d2 = deviation(path2, LIN_TARGET.u_hat)
        assert abs(d2 - eps2) < 1e-9
        devs.append(d2)
        Ts.append(path2.T)
    assert devs[0] > devs[1] > devs[2]
    assert Ts[0] < Ts[1] < Ts[2]


def test_free_T_policy_noop_when_within_band():
    model = get_model("pollution-ode")
    p = model.default_params(rho=0.55)
    from occ.steady import newton_css

    u_star = newton_css(model, FEM, pollution_flat_css(p), p)
    tgt = css_target(model, FEM, u_star, p)
    settings = CpSettings(nti=101, eps_inf=1e-3)
    T = init_T(tgt, settings)
    guess = constant_path(tgt, T, settings)
    path, _ = solve_cp_bvp(model, FEM, tgt, u_star[:2] + 1e-6, guess, T,
                           freeT=False, settings=settings)
    out, activated = free_T_policy(model, FEM, path, tgt, settings)
    assert not activated
    assert out is path


def test_arc_step_requires_history():
    from occ.cpath import CpHistory

    tgt = toy_cps_target()
    with pytest.raises(InvalidArgumentError):
        arc_step(TOY, FEM, tgt, np.array([4.0, 0.0]), tgt.u_hat0[:2],
                 CpHistory(), 0.1, CpSettings())


def test_arc_natural_limit():
    # s = 0, s_alpha = 1 reduces the arclength closure to natural stepping
    settings = CpSettings(nti=41, tol=1e-11)
    guess = constant_path(LIN_TARGET, 1.0, settings)
    v_star = np.array([1.0])
    v_hat = np.array([0.0])
    a0 = 0.3
    path, _ = solve_cp_bvp(LIN, FEM, LIN_TARGET, a0 * v_star, guess, 1.0,
                           freeT=False, settings=settings, alpha=a0)
    sigma = 0.2
    arc = {"s": np.zeros(2), "s_alpha": 1.0, "sigma": sigma,
           "ref_u0": path.u[0].copy(), "ref_alpha": a0,
           "v0_star": v_star, "v_hat": v_hat}
    stepped, info = solve_cp_bvp(LIN, FEM, LIN_TARGET, None, path, 1.0,
                                 freeT=False, settings=settings,
                                 alpha=a0 + sigma, arc=arc)
    assert abs(info["alpha"] - (a0 + sigma)) < 1e-10
    assert abs(stepped.u[0, 0] - (a0 + sigma)) < 1e-10


def test_secant_predictor_runs():
    tgt = toy_cps_target(m=61)
    settings = CpSettings(eps_inf=1e-2, nTp=2, msw=1, nti=101)
    path, hist = isc(TOY, FEM, tgt, np.array([4.0, 0.0]),
                     [0.2, 0.4, 0.6, 0.8, 1.0], settings=settings)
    assert hist.alphas[-1] == 1.0
