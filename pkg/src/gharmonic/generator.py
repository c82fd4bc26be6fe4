"""Generator of a diffusion under g-expectation, two ways.

The analytic route evaluates L f + g(f, f_x sigma) by finite differences.  The
probabilistic route forms difference quotients (E^g_{0,t}[f(X^x_t)] - f(x)) / t
for a decreasing sequence of t and extrapolates them linearly to t = 0.
"""
from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .bsde import Numerics, g_expectation
from .errors import ConfigError, PrecisionError
from .model import DiffusionSpec, Driver, ScalarField
from .pde import generator_value

DEFAULT_TS = (0.1, 0.05, 0.025)


def analytic_generator(f: ScalarField, diffusion: DiffusionSpec, driver: Driver, x, h=None):
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    step = 1e-4 * (1 + np.linalg.norm(x)) if h is None else h
    return generator_value(f, diffusion, driver, x, step)


@dataclass
class GeneratorEstimate:
    point: list
    analytic_value: float
    probabilistic_values: list  # (t, quotient, se)
    extrapolated_value: float
    extrapolated_se: float
    discrepancy: float = field(init=False)

    def __post_init__(self):
        self.discrepancy = abs(self.extrapolated_value - self.analytic_value)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "quotient", "stderr"])
            for row in self.probabilistic_values:
                w.writerow([repr(float(v)) for v in row])


def extrapolate_to_zero(ts, values, ses):
    """Weighted least-squares line through (t, value); returns intercept and its se."""
    ts = np.asarray(ts, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    ses = np.asarray(ses, dtype=np.float64)
    w = 1.0 / ses**2 if np.all(ses > 0) else np.ones_like(ts)
    X = np.column_stack([np.ones_like(ts), ts])
    cov = np.linalg.inv(X.T @ (w[:, None] * X))
    coef = cov @ (X.T @ (w * values))
    if np.all(ses > 0):
        se = float(np.sqrt(cov[0, 0]))
    else:
        # unweighted fit: propagate the given ses through the fixed weights
        weights = (cov @ X.T)[0]
        se = float(np.sqrt(np.sum((weights * ses) ** 2)))
    return float(coef[0]), se


def probabilistic_generator(f: ScalarField, diffusion: DiffusionSpec, driver: Driver, x,
                            t_sequence=DEFAULT_TS, numerics: Numerics = Numerics(), *,
                            precision_limit=None, h=None) -> GeneratorEstimate:
    ts = [float(t) for t in t_sequence]
    if len(ts) < 3 or any(b >= a for a, b in zip(ts, ts[1:])) or ts[-1] <= 0:
        raise ConfigError("t_sequence must hold at least 3 strictly decreasing positive times")
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    analytic = analytic_generator(f, diffusion, driver, x, h)
    fx = float(f(x[None, :])[0])
    limit = 0.1 * max(abs(analytic), 1.0) if precision_limit is None else precision_limit
    rows = []
    for i, t in enumerate(ts):
        num = dataclasses.replace(numerics, stream=numerics.stream + i)
        est = g_expectation(diffusion, driver, f, x, t, num)
        q, se = (est.value - fx) / t, est.se / t
        if se > limit:
            raise PrecisionError(
                f"quotient at t={t} has standard error {se:.3g} > {limit:.3g}; use more paths")
        rows.append((t, q, se))
    value, se = extrapolate_to_zero(*zip(*rows))
    return GeneratorEstimate(x.tolist(), analytic, rows, value, se)
