import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from gharmonic import model, pde
from gharmonic.errors import ComparisonViolation, ConfigError

BM = model.brownian()
ZERO = model.zero_driver()
KAPPA = model.kappa_driver(0.5)


def test_heat_kernel_sine():
    h = 2 * np.pi / 200
    T = 1.0
    dt = T / int(np.ceil(T / (0.9 * h * h)))
    sol = pde.parabolic_solve(BM, ZERO, model.sine_field(), (0.0, 2 * np.pi), T, h, dt)
    x = sol.axes[0]
    for t in (0.25, 0.5, 1.0):
        got = sol.slice_at(t)
        t_rec = sol.times[np.argmin(np.abs(sol.times - t))]
        assert np.max(np.abs(got - np.exp(-t_rec / 2) * np.sin(x))) < 1e-2


@pytest.mark.parametrize("driver", [ZERO, KAPPA, model.linear_driver(0.3)])
def test_constant_data_is_stationary(driver):
    sol = pde.parabolic_solve(BM, driver, model.constant_field(1.7), (-1.0, 1.0), 0.1, 0.05,
                              0.001)
    assert np.all(sol.values == 1.7)


def test_linear_driver_translates_linear_data():
    a, T, h = 0.4, 0.5, 0.05
    sol = pde.parabolic_solve(BM, model.linear_driver(a), model.linear_field(), (-4.0, 4.0),
                              T, h, 0.001)
    x = sol.axes[0]
    window = np.abs(x) <= 1
    assert np.max(np.abs(sol.slice_at(T)[window] - (x[window] + a * T))) < 1e-2


def test_kappa_driver_linear_data():
    T = 1.0
    sol = pde.parabolic_solve(BM, KAPPA, model.linear_field(), (-5.0, 5.0), T, 0.05, 0.001)
    x = sol.axes[0]
    w = np.abs(x) <= 1
    assert np.max(np.abs(sol.slice_at(T)[w] - (x[w] + 0.5 * T))) < 1e-2


def test_two_d_quadratic_grows_linearly():
    # u = |x|^2 + 2t solves u_t = 1/2 Laplace u and the stencil is exact on quadratics.
    # Boundary data travel one node per step, so 50 steps leave the centre untouched.
    d = model.brownian(2)
    sol = pde.parabolic_solve(d, model.zero_driver(2), model.quadratic_field(dimension=2),
                              ([-6.0, -6.0], [6.0, 6.0]), 0.1, 0.1, 0.002)
    c = slice(55, 66)
    x0 = sol.axes[0][c]
    want = x0[:, None] ** 2 + x0[None, :] ** 2 + 0.2
    np.testing.assert_allclose(sol.slice_at(0.1)[c, c], want, atol=1e-12)


def test_correlated_two_d_certificate_and_stationary_linear():
    d = model.constant_coefficients([0.0, 0.0], [[1.0, 0.0], [0.6, 0.8]], dimension=2)
    f = model.linear_field([1.0, -2.0], dimension=2)
    sol = pde.parabolic_solve(d, model.zero_driver(2), f, ([-1, -1], [1, 1]), 0.05, 0.1, 0.002)
    assert sol.certificate["monotone"]
    np.testing.assert_allclose(sol.values[-1], sol.values[0], atol=1e-12)


def test_step_restriction_enforced():
    with pytest.raises(ConfigError, match="step restriction"):
        pde.parabolic_solve(BM, ZERO, model.sine_field(), (0.0, 1.0), 0.1, 0.01, 0.001)


def test_certificate_values():
    axes = pde.make_axes((0.0, 1.0), 0.1)
    st_ = pde.Stepper(BM, KAPPA, axes, 0.001)
    # centre coefficient 1 - dt (1/h^2 + L) >= 0
    assert st_.certificate["dt_max_monotone"] == pytest.approx(1 / (100 + 0.5))
    assert st_.certificate["peclet_ok"]


def test_peclet_violation_detected():
    axes = pde.make_axes((0.0, 1.0), 0.5)
    strong = model.kappa_driver(10.0)
    assert not pde.Stepper(BM, strong, axes, 1e-4).certificate["peclet_ok"]


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 21, elements=st.floats(-3, 3)),
       arrays(np.float64, 21, elements=st.floats(0, 2)))
def test_one_step_is_monotone(u, bump):
    axes = pde.make_axes((-1.0, 1.0), 0.1)
    step = pde.Stepper(BM, KAPPA, axes, 0.004)
    assert step.certificate["monotone"]
    assert np.all(step(u + bump) >= step(u) - 1e-12)


def test_monotonicity_breaks_above_the_bound():
    axes = pde.make_axes((-1.0, 1.0), 0.1)
    step = pde.Stepper(BM, ZERO, axes, 0.02)
    assert not step.certificate["monotone"]
    u = np.zeros(21)
    bump = np.zeros(21)
    bump[10] = 1.0
    # the centre coefficient 1 - dt/h^2 is negative
    assert step(u + bump)[10] < step(u)[10]


def test_terminal_value_form_reverses_time():
    sol = pde.parabolic_solve(BM, ZERO, model.sine_field(), (0.0, np.pi), 0.1, np.pi / 20,
                              0.005)
    tv = pde.terminal_value_form(sol, 0.1)
    np.testing.assert_array_equal(tv.values[0], sol.values[-1])
    np.testing.assert_allclose(tv.times, sol.times)


def test_interpolate_and_csv(tmp_path):
    sol = pde.parabolic_solve(BM, ZERO, model.linear_field(), (-1.0, 1.0), 0.01, 0.1, 0.005)
    np.testing.assert_allclose(sol.interpolate([0.05, -0.35], 0.01), [0.05, -0.35], atol=1e-12)
    sol.to_csv(tmp_path / "u.csv")
    assert len((tmp_path / "u.csv").read_text().splitlines()) == 1 + 3 * 21


# --- residuals ----------------------------------------------------------------

def test_residual_linear_harmonic():
    res = pde.elliptic_residual(model.linear_field(), BM, ZERO, np.linspace(-2, 2, 5))
    assert np.max(np.abs(res.values)) <= 1e-10


def test_residual_exp_profile():
    res = pde.elliptic_residual(model.exp_profile(0.5), BM, KAPPA, np.linspace(-2, 2, 5))
    assert np.max(np.abs(res.values)) <= 1e-6


def test_residual_quadratic_is_one():
    res = pde.elliptic_residual(model.quadratic_field(), BM, ZERO, np.linspace(-2, 2, 5))
    np.testing.assert_allclose(res.values, 1.0, atol=1e-8)


def test_residual_two_d_grid():
    d = model.brownian(2)
    axes = [np.linspace(-1, 1, 3), np.linspace(-1, 1, 4)]
    res = pde.elliptic_residual(model.quadratic_field(dimension=2), d, model.zero_driver(2), axes)
    assert res.values.shape == (3, 4)
    np.testing.assert_allclose(res.values, 2.0, atol=1e-8)


def test_generator_value_with_drift():
    # L f for f = x^2 under dX = theta (m - X) dt + s dB is 2 x theta (m - x) + s^2
    ou = model.ornstein_uhlenbeck(1.5, 0.2, 0.7)
    v = pde.generator_value(model.quadratic_field(), ou, ZERO, np.array([0.4]), 1e-3)
    assert v == pytest.approx(2 * 0.4 * 1.5 * (0.2 - 0.4) + 0.49, abs=1e-8)


# --- comparison principle ------------------------------------------------------

def test_comparison_equal_fields():
    f = model.exp_profile(0.5)
    res = pde.comparison_principle_check(f, f, BM, KAPPA, (-1.0, 1.0), 0.1, 0.05, 0.001)
    assert res.holds and res.min_gap == 0.0


def test_comparison_constant_shift_exact():
    sub = model.sine_field()
    sup = model.ScalarField(lambda x: np.sin(x[:, 0]) + 1.0, 1, 0, "sine+1")
    res = pde.comparison_principle_check(sup, sub, BM, ZERO, (0.0, 3.0), 0.2, 0.1, 0.004)
    assert res.min_gap == pytest.approx(1.0, abs=1e-12)


def test_superharmonic_dominates_its_evolution():
    # -exp(-2 nu x) with nu > mu gives 1/2 f'' + mu |f'| = 2 nu (mu - nu) e^{-2 nu x} < 0
    sup = model.exp_profile(1.0)
    res = pde.comparison_principle_check(sup, sup, BM, KAPPA, (-1.0, 1.0), 0.5, 0.05, 0.001,
                                         hold_super_fixed=True)
    assert res.holds


def test_subharmonic_against_fixed_data_violates():
    sub = model.quadratic_field()
    with pytest.raises(ComparisonViolation):
        pde.comparison_principle_check(sub, sub, BM, ZERO, (-1.0, 1.0), 0.1, 0.05, 0.001,
                                       hold_super_fixed=True)


def test_comparison_needs_initial_order():
    with pytest.raises(ConfigError):
        pde.comparison_principle_check(model.constant_field(0.0), model.constant_field(1.0),
                                       BM, ZERO, (0.0, 1.0), 0.01, 0.1, 0.001)
