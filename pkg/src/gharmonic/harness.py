"""Statistical checks of the g-martingale / g-harmonic correspondence.

Every verdict is a Monte Carlo statement gated at ``K_SE`` standard errors.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import expr as _expr
from . import pde
from .bsde import (Numerics, backward_solve, block_slices, g_expectation,
                   g_expectation_at_exit, subset)
from .errors import ConfigError, ExitTruncationError, RadiusConditionError
from .model import DiffusionSpec, Driver, ScalarField, min_ellipticity, validate_h1, validate_h3
from .paths import Ball, Box, restart, simulate

K_SE = 3.0

MARTINGALE = "martingale-consistent"
SUPER = "super"
SUB = "sub"
INDETERMINATE = "indeterminate"


def classify(delta, se, k=K_SE):
    if not (np.isfinite(delta) and np.isfinite(se)):
        return INDETERMINATE
    if delta < -k * se:
        return SUPER
    if delta > k * se:
        return SUB
    return MARTINGALE


def overall_classification(classes):
    kinds = set(classes)
    if INDETERMINATE in kinds or {SUPER, SUB} <= kinds:
        return INDETERMINATE
    if SUPER in kinds:
        return SUPER
    if SUB in kinds:
        return SUB
    return MARTINGALE


@dataclass
class MartingaleVerdict:
    probes: list  # dicts: x, t, delta, se, classification
    overall: str

    def classifications(self):
        return [p["classification"] for p in self.probes]


def check_g_martingale(f: ScalarField, diffusion: DiffusionSpec, driver: Driver, xs, ts,
                       numerics: Numerics = Numerics()) -> MartingaleVerdict:
    """Classify E^g_t[f(X^x_t)] - f(x) at every probe (x, t).

    Probe ``i`` uses random stream ``numerics.stream + i``.
    """
    probes = []
    i = 0
    for x in xs:
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        fx = float(f(x[None, :])[0])
        for t in ts:
            est = g_expectation(diffusion, driver, f, x, t,
                                dataclasses.replace(numerics, stream=numerics.stream + i))
            delta = est.value - fx
            probes.append({"x": x.tolist(), "t": float(t), "value": est.value, "f_x": fx,
                           "delta": delta, "se": est.se,
                           "classification": classify(delta, est.se)})
            i += 1
    return MartingaleVerdict(probes, overall_classification(p["classification"] for p in probes))


# ------------------------------------------------------------ Feynman-Kac

@dataclass
class FeynmanKacReport:
    points: np.ndarray
    pde_values: np.ndarray
    bsde_values: np.ndarray
    bsde_se: np.ndarray
    max_abs: float
    mean_abs: float
    tolerance: float
    passed: bool
    box: tuple
    certificate: dict
    h3: dict = field(default_factory=dict)


def _padded_box(diffusion, points, T, h):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, diffusion.dimension)
    sig = float(np.max(np.linalg.norm(diffusion.sigma(pts), ord=2, axis=(1, 2))))
    drift = float(np.max(np.abs(diffusion.b(pts))))
    pad = 4 * sig * np.sqrt(T) + drift * T + 4 * h
    lo = np.floor((pts.min(axis=0) - pad) / h) * h
    hi = np.ceil((pts.max(axis=0) + pad) / h) * h
    return lo, hi


def feynman_kac_crosscheck(f: ScalarField, diffusion: DiffusionSpec, driver: Driver, T,
                           report_points, numerics: Numerics = Numerics(), *, h=0.05,
                           dt=None, box=None, abs_tol=2e-2) -> FeynmanKacReport:
    """Compare the PDE solution at time T with E^g_{0,T}[f(X^x_T)] at report points."""
    pts = np.asarray(report_points, dtype=np.float64).reshape(-1, diffusion.dimension)
    if not driver.satisfies_h1:
        driver = validate_h1(driver, np.linspace(-10, 10, 41)).subject
    if box is None:
        box = _padded_box(diffusion, pts, T, h)
    lo, hi = (np.atleast_1d(np.asarray(b, dtype=np.float64)) for b in box)
    if np.any(pts.min(axis=0) <= lo) or np.any(pts.max(axis=0) >= hi):
        raise ConfigError("report points must lie strictly inside the PDE box")
    h3 = validate_h3(f, (lo, hi), max(f.growth_degree, 2))
    if dt is None:
        axes = pde.make_axes((lo, hi), h)
        dt_max = pde.Stepper(diffusion, driver, axes, 1.0).certificate["dt_max_monotone"]
        dt = T / int(np.ceil(T / (0.9 * dt_max)))
    sol = pde.parabolic_solve(diffusion, driver, f, (lo, hi), T, h, dt)
    pde_vals = np.asarray(sol.interpolate(pts, T)).reshape(-1)
    bsde_vals, ses = [], []
    for i, x in enumerate(pts):
        est = g_expectation(diffusion, driver, f, x, T,
                            dataclasses.replace(numerics, stream=numerics.stream + i))
        bsde_vals.append(est.value)
        ses.append(est.se)
    bsde_vals, ses = np.array(bsde_vals), np.array(ses)
    err = np.abs(pde_vals - bsde_vals)
    tol = max(abs_tol, K_SE * float(np.max(ses)))
    return FeynmanKacReport(pts, pde_vals, bsde_vals, ses, float(err.max()), float(err.mean()),
                            tol, bool(err.max() <= tol), (lo.tolist(), hi.tolist()),
                            sol.certificate, {"verdict": h3.verdict, **h3.metrics})


# ------------------------------------------------------ mean value property

@dataclass
class MeanValueReport:
    value: float
    se: float
    f_x: float
    deviation: float
    within: bool
    truncation_fraction: float
    mean_exit_time: float


def check_mvp(f: ScalarField, diffusion: DiffusionSpec, driver: Driver, x, radius, T_max,
              numerics: Numerics = Numerics()) -> MeanValueReport:
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    est = g_expectation_at_exit(diffusion, driver, f, x, x, radius, T_max, numerics)
    fx = float(f(x[None, :])[0])
    dev = est.value - fx
    return MeanValueReport(est.value, est.se, fx, dev, abs(dev) <= K_SE * est.se,
                           est.details["truncation_fraction"], est.details["mean_exit_time"])


# --------------------------------------------------------- stopping cascade

def half_distance(region):
    """r(y) = dist(y, boundary of region) / 2, clipped at zero outside."""
    return lambda x: 0.5 * np.maximum(region.distance_to_boundary(x), 0.0)


def _radius_callable(radius_fn, dimension):
    if callable(radius_fn):
        return radius_fn
    e = _expr.parse(radius_fn) if isinstance(radius_fn, str) else radius_fn

    def r(x):
        env = {f"x{i + 1}": x[:, i] for i in range(dimension)}
        return np.broadcast_to(e.evaluate(env), (x.shape[0],)).astype(np.float64)
    return r


@dataclass
class StoppingCascade:
    start: list
    stages: list  # per stage dicts
    stage_times: np.ndarray  # (K+1, M) cumulative tau_k, tau_0 = 0
    f_start: float
    direct_value: float = float("nan")
    direct_se: float = float("nan")
    direct_truncation: float = float("nan")
    final_matches_direct: Optional[bool] = None
    epsilon: float = float("nan")

    @property
    def times_monotone(self):
        return bool(np.all(np.diff(self.stage_times, axis=0) >= 0))

    @property
    def tower_ok(self):
        return all(s["tower_ok"] for s in self.stages)


def _chain_value(stage_bundles, centers, terminal, driver, regression, sl=slice(None)):
    """Backward through stages: stage j's terminal is stage j+1's time-0 value."""
    y = terminal[sl]
    for bundle, c in zip(reversed(stage_bundles), reversed(centers)):
        sol = backward_solve(subset(bundle, sl), driver, y, regression,
                             extra_features=c[sl])
        y = sol.y[0]
    return y


def _steps_for(horizon, dt):
    return max(1, int(np.ceil(horizon / dt - 1e-9)))


def iterated_stopping(f: ScalarField, diffusion: DiffusionSpec, driver: Driver, y, region,
                      radius_fn: Union[Callable, str], stages: int,
                      numerics: Numerics = Numerics(), *, stage_steps=None, stage_dt=0.005,
                      horizon_factor=8.0, stage_horizon=None, epsilon=None,
                      direct_T=None, direct_steps=None, direct_dt=0.01,
                      compare_direct=True) -> StoppingCascade:
    """Run the cascade tau_k = inf{t >= tau_{k-1}: |X_t - X_{tau_{k-1}}| >= r(X_{tau_{k-1}})}.

    Stage k restarts every path at X_{tau_{k-1}} on random stream
    ``numerics.stream + k``; its horizon is ``horizon_factor * max r^2 /
    min eig(sigma sigma^T)`` unless ``stage_horizon`` is given.  Regression
    inside a stage conditions on the state and the stage's ball centre.

    Each stage takes ``ceil(T_k / stage_dt)`` Euler steps unless
    ``stage_steps`` fixes the count, and the direct exit run likewise uses
    ``direct_dt`` unless ``direct_steps`` is given.  The Euler exit bias grows
    with sqrt(dt) and accumulates over stages, so a fixed step count per
    stage is not enough once the stage horizon is long.
    """
    if stages < 1:
        raise ConfigError("stages must be >= 1")
    n = diffusion.dimension
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if region.distance_to_boundary(y[None, :])[0] <= 0:
        raise ConfigError("start point must be interior to U")
    r_of = _radius_callable(radius_fn, n)
    eps = 0.05 * region.diameter if epsilon is None else epsilon
    M = numerics.paths
    states = np.broadcast_to(y, (M, n)).copy()
    bundles, centers = [], []
    stage_times = np.zeros((stages + 1, M))
    records = []
    parent = None
    for k in range(1, stages + 1):
        d = region.distance_to_boundary(states)
        absorbed = d <= 0
        r = np.zeros(M)
        live = ~absorbed
        if np.any(live):
            r_live = np.asarray(r_of(states[live]), dtype=np.float64)
            bad = ~np.isfinite(r_live) | (r_live <= 0) | (r_live > d[live] + 1e-12)
            if np.any(bad):
                j = np.nonzero(live)[0][np.argmax(bad)]
                raise RadiusConditionError(
                    f"r = {r_live[np.argmax(bad)]:.6g} violates 0 < r <= dist(y, dU) = "
                    f"{d[j]:.6g}", states[j].tolist())
            r[live] = r_live
        lam = min_ellipticity(diffusion, states[live]) if np.any(live) else 0.0
        if stage_horizon is not None:
            T_k = float(stage_horizon)
        elif lam > 0 and np.any(live):
            T_k = horizon_factor * float(np.max(r)) ** 2 / lam
        else:
            T_k = 1.0
        n_k = int(stage_steps) if stage_steps else _steps_for(T_k, stage_dt)
        ball = Ball(states.copy(), r)
        if parent is None:
            parent = simulate(diffusion, y, T_k, n_k, M, numerics.seed,
                              stream=numerics.stream + 1, region=ball)
            bundle = parent
        else:
            bundle = restart(parent, states, horizon=T_k, steps=n_k,
                             stream=numerics.stream + k, region=ball)
        moved = bundle.exited | absorbed
        trunc = float(np.mean(~moved[live])) if np.any(live) else 0.0
        record = {"stage": k, "horizon": T_k, "steps": n_k, "truncation_fraction": trunc,
                  "min_radius_visited": float(r[live].min()) if np.any(live) else 0.0,
                  "absorbed_fraction": float(np.mean(absorbed))}
        if trunc > 0.10:
            raise ExitTruncationError(
                f"stage {k}: {100 * trunc:.1f}% of paths never left their ball", records + [record])
        dtau = np.where(bundle.exited, bundle.exit_times, T_k)
        dtau[absorbed] = 0.0
        stage_times[k] = stage_times[k - 1] + dtau
        states = np.array(bundle.terminal)
        d_new = region.distance_to_boundary(states)
        record["proximity_fraction"] = float(np.mean(d_new <= eps))
        record["mean_tau"] = float(stage_times[k].mean())
        bundles.append(bundle)
        centers.append(ball.center)
        records.append(record)

    fy = float(f(y[None, :])[0])
    slices = block_slices(M, numerics.blocks)
    prev_full, prev_blocks = fy, np.full(len(slices), fy)
    for k in range(1, stages + 1):
        terminal = f(bundles[k - 1].terminal)
        full = float(np.mean(_chain_value(bundles[:k], centers[:k], terminal, driver,
                                          numerics.regression)))
        blocks = np.array([np.mean(_chain_value(bundles[:k], centers[:k], terminal, driver,
                                                numerics.regression, sl)) for sl in slices])
        se = float(np.std(blocks, ddof=1) / np.sqrt(len(blocks)))
        diff = blocks - prev_blocks
        se_dev = float(np.std(diff, ddof=1) / np.sqrt(len(diff)))
        dev = full - prev_full
        records[k - 1].update({"value": full, "se": se, "tower_deviation": dev,
                               "tower_se": se_dev,
                               "tower_ok": bool(abs(dev) <= K_SE * se_dev)})
        prev_full, prev_blocks = full, blocks

    cascade = StoppingCascade(y.tolist(), records, stage_times, fy, epsilon=eps)
    del bundles, parent, bundle
    if compare_direct:
        lam0 = min_ellipticity(diffusion, y[None, :])
        half_diam = 0.5 * region.diameter
        T_d = direct_T if direct_T is not None else horizon_factor * half_diam**2 / max(lam0, 1e-12)
        num_d = dataclasses.replace(numerics, stream=numerics.stream + stages + 1,
                                    steps=direct_steps or _steps_for(T_d, direct_dt))
        est = g_expectation_at_exit(diffusion, driver, f, y, T_max=T_d, numerics=num_d,
                                    region=region)
        cascade.direct_value = est.value
        cascade.direct_se = est.se
        cascade.direct_truncation = est.details["truncation_fraction"]
        last = records[-1]
        cascade.final_matches_direct = bool(
            abs(last["value"] - est.value) <= K_SE * np.hypot(last["se"], est.se))
    return cascade
