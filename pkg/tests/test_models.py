import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from occ.errors import DomainError, InvalidArgumentError, NoConvergenceError
from occ.fem1d import assemble_operators, build_mesh, ode_operators
from occ.models import (
    control_of,
    current_value,
    get_model,
    jacobian_G,
    model_names,
    pollution_flat_css,
    residual_G,
    sloc_flat_seed,
    split_fields,
    stack_fields,
    toy_analytics,
)

PDE_FEM = assemble_operators(build_mesh(np.pi / 2, 20))
ODE_FEM = ode_operators()


def fem_for(model):
    return PDE_FEM if model.is_pde else ODE_FEM


def test_registry():
    assert set(model_names()) == {"sloc", "pollution", "pollution-ode", "toy"}
    with pytest.raises(InvalidArgumentError):
        get_model("vegetation")


@given(st.integers(1, 3), st.integers(1, 9), st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_layout_round_trip(nstates, n, seed):
    u = np.random.default_rng(seed).standard_normal(2 * nstates * n)
    assert np.array_equal(stack_fields(split_fields(u, nstates, n)), u)


def test_residual_pollution_closed_form_css():
    model = get_model("pollution")
    p = model.default_params()
    u = pollution_flat_css(p, n=PDE_FEM.n)
    g = residual_G(model, PDE_FEM, u, p)
    assert np.max(np.abs(g)) < 1e-12


def test_residual_toy_hand_value():
    model = get_model("toy")
    p = model.default_params()
    u = np.array([1.0, 0.0, 1.0, 0.0])
    g = residual_G(model, ODE_FEM, u, p)
    assert np.allclose(g, [0.0, -1.0, 0.0, 0.0], atol=1e-14)


def test_residual_constant_field_has_no_diffusion_term():
    # for constant fields the stiffness part vanishes exactly
    model = get_model("pollution")
    p = model.default_params()
    u = np.repeat([0.3, 0.4, -1.2, -0.7], PDE_FEM.n)
    g = split_fields(residual_G(model, PDE_FEM, u, p), 2, PDE_FEM.n)
    f = model.f(split_fields(u, 2, PDE_FEM.n), p)
    expect = -(PDE_FEM.M @ f.T).T
    assert np.max(np.abs(g - expect)) < 1e-13


def test_residual_dimension_mismatch():
    model = get_model("pollution")
    with pytest.raises(InvalidArgumentError):
        residual_G(model, PDE_FEM, np.zeros(5), model.default_params())


def _fd_jacobian(model, fem, u, p, h=1e-6):
    n = u.size
    J = np.zeros((n, n))
    for k in range(n):
        e = np.zeros(n)
        e[k] = h * max(1.0, abs(u[k]))
        gp = residual_G(model, fem, u + e, p)
        gm = residual_G(model, fem, u - e, p)
        J[:, k] = (gp - gm) / (2 * e[k])
    return J


@pytest.mark.parametrize("name", ["sloc", "pollution", "pollution-ode", "toy"])
def test_jacobian_matches_finite_differences(name):
    model = get_model(name)
    fem = fem_for(model)
    p = model.default_params()
    rng = np.random.default_rng(3)
    for _ in range(20):
        u = 0.4 * rng.standard_normal(2 * model.nstates * fem.n)
        if name == "sloc":
            u[fem.n:] = -1.0 - 0.3 * np.abs(u[fem.n:])  # keep costate negative
        J = jacobian_G(model, fem, u, p).toarray()
        Jfd = _fd_jacobian(model, fem, u, p)
        scale = max(1.0, np.max(np.abs(J)))
        assert np.max(np.abs(J - Jfd)) / scale < 1e-5


def test_pollution_ode_spectrum_symmetric_about_half_rho():
    model = get_model("pollution-ode")
    p = model.default_params()
    u = pollution_flat_css(p)
    # flow linearization du/dt = -dG u: spectrum pairs mu and rho - mu
    mu = np.linalg.eigvals(-jacobian_G(model, ODE_FEM, u, p).toarray())
    re = np.sort(mu.real)
    assert np.allclose(re + re[::-1], p.rho, atol=1e-10)


def test_control_values():
    sloc = get_model("sloc")
    u = np.array([0.5, -2.0])
    assert np.allclose(control_of(sloc, u, sloc.default_params()), 0.5)
    poll = get_model("pollution-ode")
    u = np.array([0.1, 0.2, -1.0, -1.5])
    assert np.allclose(control_of(poll, u, poll.default_params()), 0.0)
    toy = get_model("toy")
    assert control_of(toy, np.array([1.0, 0, 1, 0]), toy.default_params()).size == 0


def test_control_division_by_zero():
    sloc = get_model("sloc")
    with pytest.raises(ZeroDivisionError):
        control_of(sloc, np.array([0.5, 0.0]), sloc.default_params())


def test_current_value_sloc_flat_zero():
    model = get_model("sloc")
    p = model.default_params()
    n = PDE_FEM.n
    u = np.concatenate([np.zeros(n), -np.ones(n)])  # v = 0, kappa = 1
    assert abs(current_value(model, PDE_FEM, u, p)) < 1e-13


def test_current_value_pollution_css():
    model = get_model("pollution")
    p = model.default_params()  # rho = 0.5, p = 1, beta = 0.2
    u = pollution_flat_css(p, n=PDE_FEM.n)
    val = current_value(model, PDE_FEM, u, p)
    assert abs(val - 0.079722) < 1e-6


def test_current_value_toy_zero():
    model = get_model("toy")
    u = np.array([2.0, 1.0, 0.5, -0.3])
    assert current_value(model, ODE_FEM, u, model.default_params()) == 0.0


def test_current_value_domain_error():
    model = get_model("sloc")
    n = PDE_FEM.n
    u = np.concatenate([np.zeros(n), np.ones(n)])  # lambda > 0 -> kappa < 0
    with pytest.raises(DomainError):
        current_value(model, PDE_FEM, u, model.default_params())


def test_pollution_flat_css_values():
    model = get_model("pollution")
    p = model.default_params()
    u = pollution_flat_css(p)
    assert np.allclose(u, [0.216389, 0.683333, -1.0, -1.5], atol=5e-7)
    u56 = pollution_flat_css(p.updated(rho=0.56))
    assert np.allclose(u56[:2], [0.2034, 0.7159], atol=5e-4)
    u_b0 = pollution_flat_css(p.updated(beta=0.0))
    assert np.isclose(u_b0[1], (1 + p.rho) / 2)


def _sloc_flat_roots(p):
    # independent scalar oracle: scan g(v) on a grid and bisect each bracket
    from scipy.optimize import brentq

    b, gam, rho = p["b"], p["gamma"], p["rho"]

    def g(v):
        kap = b * v - v * v / (1 + v * v)
        return 2 * gam * v * kap - (rho + b - 2 * v / (1 + v * v) ** 2)

    grid = np.linspace(1e-3, 6.0, 2000)
    vals = [g(v) for v in grid]
    roots = []
    for a, bb, fa, fb in zip(grid[:-1], grid[1:], vals[:-1], vals[1:]):
        if fa * fb < 0:
            roots.append(brentq(g, a, bb, xtol=1e-14))
    return roots


def test_sloc_flat_seed_against_scalar_oracle():
    model = get_model("sloc")
    p = model.default_params(b=0.65)
    roots = _sloc_flat_roots(p)
    assert len(roots) == 3
    fsc = sloc_flat_seed(p, "FSC")
    fsm = sloc_flat_seed(p, "FSM")
    assert abs(fsc[0] - roots[0]) < 1e-9
    assert abs(fsm[0] - roots[-1]) < 1e-9
    assert fsm[0] > fsc[0] + 0.5
    # residual of the converged 2-equation system
    fem = ode_operators()
    # flat root satisfies the spatially constant steady equations
    for u in (fsc, fsm):
        kap = -1.0 / u[1]
        r1 = kap - p["b"] * u[0] + u[0] ** 2 / (1 + u[0] ** 2)
        assert abs(r1) < 1e-10


def test_sloc_flat_seed_vanished_branch():
    # above the fold the low-v pair is gone; the seed must not silently
    # converge onto the surviving high-v root
    model = get_model("sloc")
    p = model.default_params(b=0.80)
    assert len(_sloc_flat_roots(p)) == 1
    with pytest.raises(NoConvergenceError):
        sloc_flat_seed(p, "FSC")


def test_toy_analytics_multipliers():
    model = get_model("toy")
    ana = toy_analytics(model.default_params())
    g = ana["multipliers"]
    assert abs(g[0] - 1) == 0
    assert abs(g[1] - 1.45e-7) < 1e-9
    ana2 = toy_analytics(model.default_params(omega=0.04))
    assert np.isclose(ana2["multipliers"][1],
                      np.exp(-0.08 * np.pi * np.sqrt(2 * np.pi)))
    assert abs(ana2["multipliers"][1] - 0.5325) < 2e-4


def test_toy_energy_constant_on_heteroclinic():
    ana = toy_analytics(get_model("toy").default_params())
    E = ana["energy"]
    # both saddle endpoints of the costate heteroclinic sit on the same level
    assert np.isclose(E(0.0, 0.0), E(1.0, 0.0))
    assert np.isclose(E(0.0, 0.0), 1.0 / (2 * np.pi))


def test_toy_matches_polar_dynamics():
    model = get_model("toy")
    p = model.default_params(rho=1.3, omega=0.7, theta=1.1)
    rng = np.random.default_rng(5)
    for _ in range(50):
        r, phi, y1, y2 = rng.uniform(0.2, 2.0), rng.uniform(0, 2 * np.pi), \
            rng.uniform(-1, 2), rng.uniform(-1, 1)
        u = np.array([r * np.cos(phi), r * np.sin(phi), y1, y2])
        f = model.f(u[:, None], p)[:, 0]
        rdot = p["rho"] * (-r + y1 * r**3)
        phidot = p["theta"]
        fx1 = rdot * np.cos(phi) - r * np.sin(phi) * phidot
        fx2 = rdot * np.sin(phi) + r * np.cos(phi) * phidot
        expect = np.array([fx1, fx2, p["omega"] * y2,
                           p["omega"] * np.sin(2 * np.pi * y1)])
        assert np.max(np.abs(f - expect)) / max(1.0, np.max(np.abs(expect))) < 1e-10


def test_sloc_rhs_term_by_term():
    model = get_model("sloc")
    p = model.default_params(b=0.65)
    u = np.array([1.0, -1.0])
    f = model.f(split_fields(u, 1, 1), p)
    assert np.isclose(f[0, 0], 1.0 - 0.65 + 0.5)  # kappa - b v + v^2/(1+v^2)


def test_params_updated_and_rho():
    model = get_model("pollution")
    p = model.default_params()
    assert p.rho == 0.5
    p2 = p.updated(rho=0.57)
    assert p2.rho == 0.57 and p.rho == 0.5
    with pytest.raises(InvalidArgumentError):
        p.updated(nonsense=1.0)
