"""Flux models, wave-speed bounds, numerical flux, exact solutions.

Hand-evaluated states serve as spot oracles; structural flux
properties (consistency, conservation, monotonicity, e-flux) are
checked on random data with the dissipation constant at its bound.
"""

import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aledg.physics import (
    GAMMA,
    Advection,
    AdvectedSine,
    Burgers,
    BurgersSine,
    Constant,
    Euler,
    EulerPlaneWave,
    EulerVortex,
    NewtonError,
    StateError,
    ale_flux,
    lax_friedrichs,
    wave_speed_interval,
    wave_speed_states,
)

finite = st.floats(min_value=-3.0, max_value=3.0, allow_nan=False)


# -- flux models ---------------------------------------------------------------


def test_advection_flux_is_velocity_times_state():
    model = Advection((2.0, -1.0))
    u = np.array([3.0])
    npt.assert_allclose(model.flux(u), [[6.0], [-3.0]], rtol=0)
    assert model.nvars == 1


def test_advection_default_velocity_is_unit_diagonal():
    npt.assert_allclose(Advection().velocity, [1.0, 1.0], rtol=0)


def test_burgers_flux_is_half_square_in_both_directions():
    u = np.array([3.0])
    npt.assert_allclose(Burgers().flux(u), [[4.5], [4.5]], rtol=0)


def test_euler_flux_hand_evaluated_state():
    # rho = 1, velocity (1, 1), E = 3.5  =>  p = 1, energy flux 4.5
    U = np.array([1.0, 1.0, 1.0, 3.5])
    model = Euler()
    assert model.pressure(U) == pytest.approx(1.0, rel=1e-14)
    npt.assert_allclose(model.flux(U),
                        [[1.0, 2.0, 1.0, 4.5],
                         [1.0, 1.0, 2.0, 4.5]], rtol=1e-14)
    assert model.sound_speed(U) == pytest.approx(math.sqrt(1.4), rel=1e-14)


def test_euler_conserved_pressure_round_trip(rng):
    model = Euler()
    rho = 0.1 + rng.random(20)
    u, v = rng.standard_normal((2, 20))
    p = 0.1 + rng.random(20)
    U = Euler.conserved(rho, u, v, p)
    assert U.shape == (20, 4)
    npt.assert_allclose(model.pressure(U), p, rtol=1e-13)
    npt.assert_allclose(U[:, 1] / U[:, 0], u, rtol=1e-13)
    model.validate(U)


def test_euler_validate_rejects_bad_states():
    model = Euler()
    with pytest.raises(StateError):
        model.validate(np.array([-1.0, 0.0, 0.0, 1.0]))
    with pytest.raises(StateError):
        model.validate(np.array([1.0, 5.0, 0.0, 1.0]))   # kinetic > total


# -- grid-relative flux --------------------------------------------------------


def test_ale_flux_vanishes_when_grid_follows_advection():
    model = Advection((1.0, 1.0))
    u = np.array([1.7])
    omega = np.array([1.0, 1.0])
    npt.assert_allclose(ale_flux(model, omega, u), 0.0, atol=0)


def test_ale_flux_burgers_spot_value():
    g = ale_flux(Burgers(), np.array([0.5, 0.0]), np.array([1.0]))
    npt.assert_allclose(g, [[0.0], [0.5]], rtol=0)


def test_ale_flux_shapes_broadcast(rng):
    u = rng.random((4, 6, 1)) + 0.5
    omega = rng.standard_normal((4, 6, 2))
    g = ale_flux(Burgers(), omega, u)
    assert g.shape == (4, 6, 2, 1)


# -- wave-speed bounds ---------------------------------------------------------


def test_wave_speed_interval_advection_spots():
    model = Advection((1.0, 1.0))
    n = np.array([1.0, 0.0])
    assert wave_speed_interval(model, 0.5, 1.5, np.zeros(2), n) == 1.0
    # grid moving with the advection velocity: zero relative speed
    assert wave_speed_interval(model, 0.5, 1.5, np.array([1.0, 1.0]), n) == 0.0


def test_wave_speed_interval_burgers_spot():
    got = wave_speed_interval(Burgers(), 0.5, 1.5, np.zeros(2),
                              np.array([1.0, 0.0]))
    assert got == 1.5


def test_wave_speed_interval_burgers_dominates_dense_sampling(rng):
    model = Burgers()
    for _ in range(50):
        m = rng.uniform(-2.0, 1.0)
        M = m + rng.uniform(0.1, 2.0)
        omega = rng.uniform(-1.0, 1.0, 2)
        n = rng.uniform(-1.0, 1.0, 2)
        bound = wave_speed_interval(model, m, M, omega, n)
        u = np.linspace(m, M, 201)
        # d/du [g . n] = u (n_x + n_y) - omega . n
        speeds = np.abs(u * (n[0] + n[1]) - omega @ n)
        assert bound >= speeds.max() - 1e-13
        assert bound == pytest.approx(speeds.max(), rel=1e-12)


def test_wave_speed_interval_rejects_euler():
    with pytest.raises(TypeError):
        wave_speed_interval(Euler(), 0.0, 1.0, np.zeros(2),
                            np.array([1.0, 0.0]))


def test_wave_speed_states_euler_spot():
    U = np.array([1.0, 1.0, 1.0, 3.5])
    got = wave_speed_states(Euler(), U, U, np.zeros(2), np.array([1.0, 0.0]))
    assert got == pytest.approx(1.0 + math.sqrt(1.4), rel=1e-14)


def test_wave_speed_states_scales_with_normal(rng):
    U = Euler.conserved(1.0, 0.3, -0.2, 0.7)
    n = np.array([0.6, -0.8])
    one = wave_speed_states(Euler(), U, U, np.zeros(2), n)
    two = wave_speed_states(Euler(), U, U, np.zeros(2), 2.0 * n)
    assert two == pytest.approx(2.0 * one, rel=1e-14)


# -- numerical flux ------------------------------------------------------------


def test_lax_friedrichs_upwind_spot():
    model = Advection((1.0, 1.0))
    ghat = lax_friedrichs(model, np.array([2.0]), np.array([0.0]),
                          np.zeros(2), np.array([1.0, 0.0]))
    npt.assert_allclose(ghat, [2.0], rtol=0)   # pure upwind value c.n u_int


@given(u=finite, wx=finite, wy=finite, nx=finite, ny=finite)
@settings(max_examples=60, deadline=None)
def test_lax_friedrichs_consistency_scalar(u, wx, wy, nx, ny):
    omega = np.array([wx, wy])
    n = np.array([nx, ny])
    state = np.array([u])
    for model in (Advection((1.0, 1.0)), Burgers()):
        ghat = lax_friedrichs(model, state, state, omega, n)
        gn = np.sum(ale_flux(model, omega, state) * n[:, None], axis=-2)
        npt.assert_allclose(ghat, gn, atol=1e-12)


@given(a=finite, b=finite, wx=finite, wy=finite, nx=finite, ny=finite)
@settings(max_examples=60, deadline=None)
def test_lax_friedrichs_conservation_under_reversal(a, b, wx, wy, nx, ny):
    omega = np.array([wx, wy])
    n = np.array([nx, ny])
    ua, ub = np.array([a]), np.array([b])
    for model in (Advection((1.0, 1.0)), Burgers()):
        left = lax_friedrichs(model, ua, ub, omega, n)
        right = lax_friedrichs(model, ub, ua, omega, -n)
        npt.assert_allclose(left, -right, atol=1e-12)


def test_lax_friedrichs_consistency_euler(rng):
    model = Euler()
    for _ in range(20):
        U = Euler.conserved(0.2 + rng.random(), rng.standard_normal(),
                            rng.standard_normal(), 0.2 + rng.random())
        omega = rng.standard_normal(2)
        n = rng.standard_normal(2)
        ghat = lax_friedrichs(model, U, U, omega, n)
        gn = np.sum(ale_flux(model, omega, U) * n[:, None], axis=-2)
        npt.assert_allclose(ghat, gn, atol=1e-12)


def test_lax_friedrichs_monotone_within_interval_bound(rng):
    """ghat is nondecreasing in u_int and nonincreasing in u_ext when
    lam dominates the interval wave speed."""
    model = Burgers()
    m, M = -1.0, 2.0
    grid = np.linspace(m, M, 21)
    for _ in range(10):
        omega = rng.uniform(-1.0, 1.0, 2)
        n = rng.uniform(-1.0, 1.0, 2)
        lam = wave_speed_interval(model, m, M, omega, n)
        f = np.array([[lax_friedrichs(model, np.array([a]), np.array([b]),
                                      omega, n, lam=lam)[0]
                       for b in grid] for a in grid])
        assert (np.diff(f, axis=0) >= -1e-12).all()   # in u_int
        assert (np.diff(f, axis=1) <= 1e-12).all()    # in u_ext


def test_lax_friedrichs_e_flux_property(rng):
    """(ghat(a, b) - g(phi).n)(b - a) <= 0 for phi between the traces."""
    for model in (Advection((1.0, 1.0)), Burgers()):
        for _ in range(30):
            a, b = rng.uniform(-2.0, 2.0, 2)
            omega = rng.uniform(-1.0, 1.0, 2)
            n = rng.uniform(-1.0, 1.0, 2)
            ghat = lax_friedrichs(model, np.array([a]), np.array([b]),
                                  omega, n)[0]
            for phi in np.linspace(a, b, 30):
                gn = np.sum(ale_flux(model, omega, np.array([phi]))
                            * n[:, None], axis=-2)[0]
                assert (ghat - gn) * (b - a) <= 1e-12


# -- exact solutions -----------------------------------------------------------


def test_constant_solution():
    sol = Constant(2.5)
    out = sol(np.array([1.0, 0.3]), np.array([0.0, 2.0]), 7.0)
    npt.assert_allclose(out, 2.5, rtol=0)
    assert sol.initial_bounds == (2.5, 2.5)
    vec = Constant((1.0, 0.0, 0.0, 2.5))
    assert vec.nvars == 4
    assert vec.initial_bounds is None


def test_advected_sine_range_and_spot():
    sol = AdvectedSine()
    assert sol.initial_bounds == (0.5, 1.5)
    assert sol(0.5, 0.0, 0.0)[..., 0] == pytest.approx(1.5, rel=1e-15)
    x = np.linspace(0.0, 2.0, 101)
    vals = sol(x, x[::-1], 0.37)
    assert vals.min() >= 0.5 - 1e-12 and vals.max() <= 1.5 + 1e-12


def test_advected_sine_translates_with_unit_diagonal_velocity(rng):
    sol = AdvectedSine()
    x, y = rng.uniform(0.0, 2.0, (2, 50))
    t = 0.83
    npt.assert_allclose(sol(x, y, t), sol(x - t, y - t, 0.0), rtol=1e-13)


def test_burgers_sine_matches_initial_data_at_t0(rng):
    sol = BurgersSine()
    x, y = rng.uniform(0.0, 2.0, (2, 40))
    npt.assert_allclose(sol(x, y, 0.0)[..., 0],
                        1.0 + 0.5 * np.sin(np.pi * (x + y)), rtol=1e-13)


def test_burgers_sine_satisfies_implicit_equation(rng):
    sol = BurgersSine()
    x, y = rng.uniform(0.0, 2.0, (2, 1000))
    t = rng.uniform(0.0, 0.1, 1000)
    u = np.array([sol(xi, yi, ti)[0] for xi, yi, ti in zip(x, y, t)])
    residual = u - 1.0 - 0.5 * np.sin(np.pi * (x + y - 2.0 * u * t))
    assert np.abs(residual).max() <= 1e-12


def test_burgers_sine_agrees_with_bracketing_solver():
    from scipy.optimize import brentq
    sol = BurgersSine()
    for (x, y, t) in [(0.3, 0.2, 0.05), (1.7, 0.9, 0.1), (0.0, 1.1, 0.08)]:
        got = float(sol(x, y, t)[0])
        # before characteristics cross the residual is monotone in u
        ref = brentq(
            lambda u: u - 1.0 - 0.5 * math.sin(math.pi * (x + y - 2.0 * u * t)),
            0.4, 1.6, xtol=1e-15)
        assert got == pytest.approx(ref, abs=1e-12)


def test_burgers_sine_raises_after_characteristics_cross():
    sol = BurgersSine()
    with pytest.raises(NewtonError):
        sol(np.array([0.3, 0.9]), np.array([0.1, 0.4]), 1.0)


def test_euler_plane_wave_uniform_flow_fields(rng):
    sol = EulerPlaneWave()
    model = Euler()
    x, y = rng.uniform(0.0, 2.0, (2, 40))
    U = sol(x, y, 0.41)
    npt.assert_allclose(U[:, 1] / U[:, 0], 1.0, rtol=1e-13)
    npt.assert_allclose(U[:, 2] / U[:, 0], 1.0, rtol=1e-13)
    npt.assert_allclose(model.pressure(U), 1.0, rtol=1e-12)
    npt.assert_allclose(U[:, 0],
                        1.0 + 0.5 * np.sin(np.pi * (x + y - 2.0 * 0.41)),
                        rtol=1e-13)


def test_euler_vortex_centre_state():
    sol = EulerVortex()
    gamma = GAMMA
    alpha = (gamma - 1.0) * 0.3 ** 2 / (8.0 * gamma * math.pi ** 2)
    core = 1.0 - alpha * math.exp(1.0 / 1.5 ** 2)
    U = sol(5.0, 5.0, 0.0)
    assert U[..., 0] == pytest.approx(core ** (1.0 / (gamma - 1.0)), rel=1e-14)
    # swirl vanishes at the centre: velocity is the background flow
    npt.assert_allclose(U[..., 1] / U[..., 0], 2.0 / math.sqrt(5.0),
                        rtol=1e-14)
    npt.assert_allclose(U[..., 2] / U[..., 0], 1.0 / math.sqrt(5.0),
                        rtol=1e-14)
    assert Euler().pressure(U) == pytest.approx(
        core ** (gamma / (gamma - 1.0)), rel=1e-13)


def test_euler_vortex_far_field_is_background_flow():
    U = EulerVortex()(50.0, -40.0, 0.0)
    npt.assert_allclose(U[..., 0], 1.0, rtol=1e-12)
    assert Euler().pressure(U) == pytest.approx(1.0, rel=1e-11)


def test_euler_vortex_translates_with_background_flow(rng):
    sol = EulerVortex()
    x = rng.uniform(0.0, 20.0, 30)
    y = rng.uniform(0.0, 15.0, 30)
    t = math.sqrt(125.0)                   # centre displacement (10, 5)
    npt.assert_allclose(sol(x, y, t), sol(x - 10.0, y - 5.0, 0.0),
                        rtol=1e-10, atol=1e-13)


def test_euler_vortex_rejects_vacuum_parameters():
    with pytest.raises(StateError):
        EulerVortex(eps=14.0)(5.0, 5.0, 0.0)
