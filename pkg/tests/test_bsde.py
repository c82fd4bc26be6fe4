import dataclasses

import numpy as np
import pytest

from gharmonic import bsde, model
from gharmonic.bsde import Numerics
from gharmonic.errors import (ComparisonViolation, ConfigError, ExitTruncationError,
                              SolverError)
from gharmonic.model import Driver
from gharmonic.paths import simulate

BM = model.brownian()
KAPPA = model.kappa_driver(0.5)
SMALL = Numerics(paths=20_000, steps=50, seed=3)


def test_zero_driver_is_sample_mean():
    b = simulate(BM, 0.3, 1.0, 40, 20_000, seed=1)
    term = np.sin(b.terminal[:, 0]) + b.terminal[:, 0] ** 2
    sol = bsde.backward_solve(b, model.zero_driver(), term)
    assert abs(sol.y0 - term.mean()) <= 1e-12


def test_kappa_closed_form():
    # y_s = X_s + mu (T - s), z = 1 solves the equation for terminal X_T
    x, T, mu = 0.2, 1.0, 0.5
    est = bsde.g_expectation(BM, KAPPA, model.linear_field(), [x], T, SMALL)
    assert abs(est.value - (x + mu * T)) <= 3 * est.se
    assert est.se < 0.02


def test_linear_driver_quadratic_terminal():
    # drift alpha under the changed measure: (x + alpha T)^2 + T
    x, T, a = 0.1, 1.0, 0.4
    est = bsde.g_expectation(BM, model.linear_driver(a), model.quadratic_field(), [x], T, SMALL)
    assert abs(est.value - ((x + a * T) ** 2 + T)) <= 3 * est.se + 1e-2


def test_constant_terminal_is_exact():
    for driver in (KAPPA, model.linear_driver(0.3), model.zero_driver()):
        est = bsde.g_expectation(BM, driver, model.constant_field(2.5), [0.0], 1.0,
                                 dataclasses.replace(SMALL, paths=2000))
        assert est.value == 2.5
        assert est.se == 0.0


def test_z_recovers_volatility_of_linear_terminal():
    b = simulate(BM, 0.0, 1.0, 50, 20_000, seed=5)
    sol = bsde.backward_solve(b, KAPPA, b.terminal[:, 0])
    assert abs(sol.z[:, :, 0].mean() - 1.0) < 0.02


def test_zero_driver_martingale():
    est = bsde.g_expectation(BM, model.zero_driver(), model.linear_field(), [0.7], 0.5, SMALL)
    assert abs(est.value - 0.7) <= 3 * est.se


def test_frozen_paths_keep_values():
    b = simulate(BM, 0.0, 2.0, 100, 5000, seed=2, region=bsde.Ball(np.zeros(1), 0.3))
    sol = bsde.backward_solve(b, KAPPA, b.terminal[:, 0])
    for m in np.nonzero(b.exited)[0][:50]:
        k = b.exit_index[m]
        assert np.all(sol.y[k:, m] == sol.y[-1, m])
        assert np.all(sol.z[k:, m] == 0)


def test_driver_without_lipschitz_estimate_rejected():
    b = simulate(BM, 0.0, 1.0, 10, 100, seed=0)
    d = model.driver_from_expr("0.5*abs(z1)")
    with pytest.raises(ConfigError):
        bsde.backward_solve(b, d, b.terminal[:, 0])


def test_picard_divergence_reports_step():
    b = simulate(BM, 0.0, 1.0, 10, 500, seed=0)
    # claims a small Lipschitz constant but is violently expanding
    bad = Driver(lambda y, z: 1e6 * y, 1, True, 0.1, None, "liar")
    with pytest.raises(SolverError) as info:
        bsde.backward_solve(b, bad, b.terminal[:, 0] + 1.0)
    assert info.value.step == 9


def test_terminal_shape_checked():
    b = simulate(BM, 0.0, 1.0, 10, 100, seed=0)
    with pytest.raises(ConfigError):
        bsde.backward_solve(b, KAPPA, np.zeros(99))


def test_determinism():
    a = bsde.g_expectation(BM, KAPPA, model.exp_profile(0.5), [0.0], 1.0, SMALL)
    b = bsde.g_expectation(BM, KAPPA, model.exp_profile(0.5), [0.0], 1.0, SMALL)
    assert a.value == b.value and a.se == b.se


def test_solution_csv(tmp_path):
    b = simulate(BM, 0.0, 1.0, 10, 1000, seed=0)
    sol = bsde.backward_solve(b, KAPPA, b.terminal[:, 0])
    sol.to_csv(tmp_path / "y.csv", b, bins=5)
    assert (tmp_path / "y.csv").read_text().startswith("step,time,")


# --- exit-time expectations ---------------------------------------------------

EXIT = Numerics(paths=20_000, steps=200, seed=4)


def test_exit_linear_symmetric():
    est = bsde.g_expectation_at_exit(BM, model.zero_driver(), model.linear_field(), [0.3],
                                     radius=0.5, T_max=2.0, numerics=EXIT)
    assert abs(est.value - 0.3) <= 3 * est.se
    assert est.details["truncation_fraction"] < 1e-3


def test_exit_concave_is_below():
    f = model.quadratic_field(-1.0)
    est = bsde.g_expectation_at_exit(BM, model.zero_driver(), f, [0.0], radius=0.5, T_max=2.0,
                                     numerics=EXIT)
    assert est.value <= 0.0 + 3 * est.se


def test_exit_g_harmonic_profile():
    f = model.exp_profile(0.5)
    est = bsde.g_expectation_at_exit(BM, KAPPA, f, [0.0], radius=0.5, T_max=2.0, numerics=EXIT)
    assert abs(est.value - f([[0.0]])[0]) <= 3 * est.se


def test_exit_truncation_refused():
    with pytest.raises(ExitTruncationError) as info:
        bsde.g_expectation_at_exit(BM, KAPPA, model.linear_field(), [0.0], radius=2.0,
                                   T_max=0.1, numerics=dataclasses.replace(EXIT, paths=2000))
    assert info.value.report["truncation_fraction"] > 0.1


# --- comparison ----------------------------------------------------------------

def _bundle():
    return simulate(BM, 0.0, 1.0, 50, 20_000, seed=6)


def test_comparison_zero_vs_kappa():
    b = _bundle()
    rep = bsde.comparison_check(b, model.zero_driver(), KAPPA, b.terminal[:, 0])
    assert rep.holds_strictly
    assert abs(rep.y0_upper - 0.5) <= 3 * rep.se_upper


def test_comparison_equal_drivers_bit_exact():
    b = _bundle()
    rep = bsde.comparison_check(b, KAPPA, KAPPA, b.terminal[:, 0])
    assert rep.y0_lower == rep.y0_upper


def test_comparison_sign_flipped():
    b = _bundle()
    neg = model.driver_from_expr("-mu*abs(z1)", {"mu": 0.5})
    neg = model.validate_h1(neg, [0.0]).subject
    rep = bsde.comparison_check(b, neg, KAPPA, b.terminal[:, 0])
    assert rep.holds_strictly
    assert abs(rep.y0_lower + 0.5) <= 3 * rep.se_lower


def test_comparison_requires_ordered_drivers():
    b = _bundle()
    with pytest.raises(ConfigError):
        bsde.comparison_check(b, KAPPA, model.zero_driver(), b.terminal[:, 0])


def test_comparison_violation_is_raised():
    # g1 <= g2 on the sampled box, but not where the solution lives
    b = simulate(BM, 0.0, 1.0, 20, 5000, seed=6)
    g1 = Driver(lambda y, z: np.where(np.abs(z[:, 0]) > 8, 100.0 * (np.abs(z[:, 0]) - 8), 0.0)
                + 2.0 * np.abs(z[:, 0]), 1, True, 102.0, None, "steep")
    g2 = Driver(lambda y, z: np.abs(z[:, 0]) * 2.0 + 0 * y, 1, True, 2.0, None, "flat")
    big = 10.0 * b.terminal[:, 0]
    with pytest.raises((ComparisonViolation, ConfigError)):
        bsde.comparison_check(b, g1, g2, big)
