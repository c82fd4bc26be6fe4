"""Backward regression solver for y_s = y_t + int_s^t g(y, z) dr - int_s^t z dB.

Discretization on the bundle's grid, for k = N-1, ..., 0::

    yhat_k = E[y_{k+1} | X_k]
    z_k    = E[(y_{k+1} - yhat_k) dB_k | X_k] / dt
    y_k    = yhat_k + dt * g(y_k, z_k)          (Picard iteration)

Subtracting ``yhat_k`` before multiplying by ``dB_k`` leaves the conditional
expectation unchanged (dB_k has mean zero given X_k) and removes most of the
regression noise in ``z``.  Paths past their exit index are frozen: y keeps
its value and z is zero, which solves the equation because g(y, 0) = 0.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ComparisonViolation, ConfigError, ExitTruncationError, SolverError
from .model import Driver, DiffusionSpec, ScalarField
from .paths import Ball, PathBundle, simulate
from .regression import Projector, RegressionConfig

log = logging.getLogger(__name__)

PICARD_TOL = 1e-12
PICARD_MAX = 50


@dataclass
class BsdeSolution:
    times: np.ndarray
    y: np.ndarray  # (N+1, M)
    z: np.ndarray  # (N, M, n)
    y0: float
    regression_config: RegressionConfig
    picard_iterations_used: np.ndarray
    fallback_count: int = 0

    def to_csv(self, path, bundle: PathBundle, bins=20):
        """Per step: bin centre of the state, mean fitted y and z in each bin."""
        n = self.z.shape[2]
        cfg = RegressionConfig(bins_per_dim=bins, min_count=1)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "time"] + [f"bin_x_{i + 1}" for i in range(n)]
                       + ["y_fit"] + [f"z_fit_{i + 1}" for i in range(n)])
            for k in range(self.z.shape[0]):
                x = bundle.states[k]
                p = Projector(x, cfg)
                for b in range(p.nbins):
                    sel = p.labels == b
                    row = [k, repr(float(self.times[k]))]
                    row += [repr(float(v)) for v in x[sel].mean(axis=0)]
                    row += [repr(float(self.y[k, sel].mean()))]
                    row += [repr(float(v)) for v in self.z[k, sel].mean(axis=0)]
                    w.writerow(row)


def _check_driver(driver: Driver, dt):
    lip = driver.lipschitz_estimate
    if not np.isfinite(lip):
        raise ConfigError("driver has no Lipschitz estimate; run model.validate_h1 first")
    if dt * lip >= 1:
        raise ConfigError(
            f"dt * Lipschitz = {dt * lip:.3g} >= 1; the implicit step is not a contraction")


def backward_solve(bundle: PathBundle, driver: Driver, terminal,
                   regression: RegressionConfig = RegressionConfig(), *,
                   extra_features=None) -> BsdeSolution:
    """Solve the BSDE backward along ``bundle`` with terminal values ``terminal``.

    ``extra_features`` (shape ``(M, e)``) are appended to the state in every
    regression; use it when the Markov state is larger than X (for example
    the centre of the current exit ball).
    """
    terminal = np.asarray(terminal, dtype=np.float64)
    N, M, n = bundle.steps, bundle.paths, bundle.dimension
    if terminal.shape != (M,):
        raise ConfigError(f"terminal must have shape ({M},), got {terminal.shape}")
    if not np.all(np.isfinite(terminal)):
        raise ConfigError("terminal values must be finite")
    dt = bundle.dt
    _check_driver(driver, dt)
    extra = None
    if extra_features is not None:
        extra = np.asarray(extra_features, dtype=np.float64).reshape(M, -1)

    y = np.empty((N + 1, M))
    z = np.zeros((N, M, n))
    y[N] = terminal
    iters = np.zeros(N, dtype=np.int64)
    merged = 0
    for k in range(N - 1, -1, -1):
        y[k] = y[k + 1]
        live = bundle.alive(k)
        if not np.any(live):
            continue
        if live.all():
            idx = slice(None)
        else:
            idx = np.nonzero(live)[0]
        x = bundle.states[k][idx]
        feats = x if extra is None else np.hstack([x, extra[idx]])
        proj = Projector(feats, regression)
        merged += proj.merged_bins
        nxt = y[k + 1][idx]
        yhat = proj.project(nxt)
        resid = nxt - yhat
        zk = proj.project(resid[:, None] * bundle.increments[k][idx]) / dt
        yk = yhat
        for it in range(1, PICARD_MAX + 1):
            new = yhat + dt * driver(yk, zk)
            delta = np.max(np.abs(new - yk))
            yk = new
            if delta <= PICARD_TOL * max(1.0, float(np.max(np.abs(yhat)))):
                break
        else:
            raise SolverError(f"Picard iteration did not converge (last change {delta:.3g})", k)
        iters[k] = it
        y[k][idx] = yk
        z[k][idx] = zk
    if merged:
        log.debug("merged %d sparse regression bins", merged)
    return BsdeSolution(bundle.times, y, z, float(np.mean(y[0])), regression, iters, merged)


# ----------------------------------------------------------------- numerics

@dataclass(frozen=True)
class Numerics:
    paths: int = 100_000
    steps: int = 200
    seed: int = 0
    stream: int = 0
    regression: RegressionConfig = field(default_factory=RegressionConfig)
    blocks: int = 20

    def __post_init__(self):
        if self.paths < 1 or self.steps < 1:
            raise ConfigError("paths and steps must be positive")
        if self.blocks < 2 or self.blocks > self.paths:
            raise ConfigError("blocks must be between 2 and the number of paths")


@dataclass
class Estimate:
    value: float
    se: float
    block_values: np.ndarray = field(repr=False, default=None)
    details: dict = field(default_factory=dict)


def subset(bundle: PathBundle, sl: slice) -> PathBundle:
    return PathBundle(
        bundle.times,
        bundle.states[:, sl],
        bundle.increments[:, sl],
        bundle.seed,
        bundle.stream,
        bundle.step_offset,
        bundle.diffusion,
        None if bundle.exit_index is None else bundle.exit_index[sl],
    )


def block_slices(paths, blocks):
    edges = np.linspace(0, paths, blocks + 1).round().astype(int)
    return [slice(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]


def solve_with_error(bundle: PathBundle, driver: Driver, terminal, regression, blocks,
                     **kw):
    """Full-sample y0 plus a batch-means standard error over contiguous path blocks."""
    full = backward_solve(bundle, driver, terminal, regression, **kw)
    vals = []
    extra = kw.pop("extra_features", None)
    for sl in block_slices(bundle.paths, blocks):
        sub_kw = dict(kw)
        if extra is not None:
            sub_kw["extra_features"] = np.asarray(extra)[sl]
        vals.append(backward_solve(subset(bundle, sl), driver, terminal[sl], regression,
                                   **sub_kw).y0)
    vals = np.array(vals)
    se = float(np.std(vals, ddof=1) / np.sqrt(len(vals)))
    return full, Estimate(full.y0, se, vals)


def g_expectation(diffusion: DiffusionSpec, driver: Driver, f: ScalarField, x, t,
                  numerics: Numerics = Numerics()) -> Estimate:
    """E^g_{0,t}[f(X^x_t)] with a block standard error."""
    bundle = simulate(diffusion, x, t, numerics.steps, numerics.paths, numerics.seed,
                      stream=numerics.stream)
    terminal = f(bundle.terminal)
    _, est = solve_with_error(bundle, driver, terminal, numerics.regression, numerics.blocks)
    est.details = {"x": np.atleast_1d(x).tolist(), "t": float(t)}
    return est


MAX_TRUNCATION = 0.10


def g_expectation_at_exit(diffusion: DiffusionSpec, driver: Driver, f: ScalarField, x,
                          center=None, radius=None, T_max=1.0,
                          numerics: Numerics = Numerics(), *, region=None) -> Estimate:
    """E^g_{0, tau}[f(X_tau)] for the exit time tau from a ball (or ``region``), capped at T_max.

    ``details["truncation_fraction"]`` is the share of paths still inside at
    ``T_max``; above 10 % the estimate is refused.
    """
    if region is None:
        if radius is None or radius <= 0:
            raise ConfigError("radius must be positive")
        region = Ball(np.atleast_1d(np.asarray(x if center is None else center, dtype=float)),
                      float(radius))
    if not T_max > 0:
        raise ConfigError("T_max must be positive")
    bundle = simulate(diffusion, x, T_max, numerics.steps, numerics.paths, numerics.seed,
                      stream=numerics.stream, region=region)
    trunc = bundle.truncation_fraction
    report = {"truncation_fraction": trunc,
              "mean_exit_time": float(np.nanmean(bundle.exit_times)) if trunc < 1 else np.nan}
    if trunc > MAX_TRUNCATION:
        raise ExitTruncationError(
            f"{100 * trunc:.1f}% of paths did not exit by T_max={T_max}; increase T_max", report)
    terminal = f(bundle.terminal)
    _, est = solve_with_error(bundle, driver, terminal, numerics.regression, numerics.blocks)
    est.details = report
    return est


@dataclass
class ComparisonReport:
    y0_lower: float
    se_lower: float
    y0_upper: float
    se_upper: float
    combined_se: float
    holds_strictly: bool
    holds_within_noise: bool


def comparison_check(bundle: PathBundle, g1: Driver, g2: Driver, terminal,
                     regression: RegressionConfig = RegressionConfig(), *, blocks=20,
                     samples=2000, seed=0) -> ComparisonReport:
    """Check y0(g1) <= y0(g2) on common paths, given g1 <= g2 pointwise."""
    rng = np.random.default_rng(seed)
    n = bundle.dimension
    ys = rng.uniform(-5, 5, samples)
    zs = rng.uniform(-5, 5, (samples, n))
    if np.any(g1(ys, zs) > g2(ys, zs) + 1e-12):
        raise ConfigError("comparison_check needs g1 <= g2 on the validation samples")
    terminal = np.asarray(terminal, dtype=np.float64)
    _, lo = solve_with_error(bundle, g1, terminal, regression, blocks)
    _, hi = solve_with_error(bundle, g2, terminal, regression, blocks)
    comb = float(np.hypot(lo.se, hi.se))
    rep = ComparisonReport(lo.value, lo.se, hi.value, hi.se, comb,
                           lo.value <= hi.value, lo.value <= hi.value + 3 * comb)
    if not rep.holds_within_noise:
        raise ComparisonViolation(
            f"y0(g1) = {lo.value:.6g} exceeds y0(g2) = {hi.value:.6g} by more than 3 se", rep)
    return rep
