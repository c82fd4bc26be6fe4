"""Euler-Maruyama simulation of dX = b(X) dt + sigma(X) dB with exit-time marking.

Brownian increments come from a counter-based generator: the normals for
time step ``k`` and path block ``j`` are drawn from Philox keyed by ``seed``
with counter ``(0, k, j, stream)``.  Any subset of (step, block) pairs can
therefore be regenerated independently, which makes simulations
order-independent and lets a restarted bundle splice the exact increment
stream of a longer run.

Arrays are laid out step-major: ``states[k, m, :]`` is path ``m`` at time
``times[k]``.
"""
from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, SimulationError
from .model import DiffusionSpec

BLOCK = 4096
NO_EXIT = -1


def brownian_increments(seed, stream, step, paths, dimension, dt):
    """Increments for one time step, shape ``(paths, dimension)``."""
    out = np.empty((paths, dimension))
    scale = np.sqrt(dt)
    for j, start in enumerate(range(0, paths, BLOCK)):
        stop = min(start + BLOCK, paths)
        bitgen = np.random.Philox(key=int(seed), counter=[0, int(step), j, int(stream)])
        out[start:stop] = np.random.Generator(bitgen).standard_normal((stop - start, dimension))
    return out * scale


@dataclass(frozen=True)
class Ball:
    """Open ball(s); ``center`` may be ``(n,)`` or per path ``(M, n)``, ``radius`` scalar or ``(M,)``."""
    center: np.ndarray
    radius: object

    def outside(self, x):
        c = np.asarray(self.center, dtype=np.float64)
        return np.linalg.norm(x - c, axis=-1) >= np.asarray(self.radius)

    def distance_to_boundary(self, x):
        c = np.asarray(self.center, dtype=np.float64)
        return np.asarray(self.radius) - np.linalg.norm(x - c, axis=-1)

    @property
    def diameter(self):
        return 2.0 * float(np.max(self.radius))


@dataclass(frozen=True)
class Box:
    """Open box prod_i (lo_i, hi_i)."""
    lo: np.ndarray
    hi: np.ndarray

    def outside(self, x):
        return np.any((x <= self.lo) | (x >= self.hi), axis=-1)

    def distance_to_boundary(self, x):
        """Signed distance; negative outside the box."""
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        inside = np.min(np.minimum(x - lo, hi - x), axis=-1)
        return inside

    @property
    def diameter(self):
        return float(np.linalg.norm(np.asarray(self.hi) - np.asarray(self.lo)))


def make_region(spec):
    """Region from a mapping ``{"ball": {"center", "radius"}}`` or ``{"box": {"lo", "hi"}}``."""
    if "ball" in spec:
        b = spec["ball"]
        r = float(b["radius"])
        if r <= 0:
            raise ConfigError("ball radius must be positive")
        return Ball(np.atleast_1d(np.asarray(b["center"], dtype=np.float64)), r)
    if "box" in spec:
        b = spec["box"]
        lo = np.atleast_1d(np.asarray(b["lo"], dtype=np.float64))
        hi = np.atleast_1d(np.asarray(b["hi"], dtype=np.float64))
        if np.any(hi <= lo):
            raise ConfigError("box must have hi > lo in every coordinate")
        return Box(lo, hi)
    raise ConfigError("region must be a 'ball' or a 'box'")


@dataclass(frozen=True)
class PathBundle:
    times: np.ndarray
    states: np.ndarray
    increments: np.ndarray
    seed: int
    stream: int
    step_offset: int
    diffusion: DiffusionSpec
    exit_index: Optional[np.ndarray] = None

    @property
    def dt(self):
        return float(self.times[1] - self.times[0])

    @property
    def steps(self):
        return self.states.shape[0] - 1

    @property
    def paths(self):
        return self.states.shape[1]

    @property
    def dimension(self):
        return self.states.shape[2]

    @property
    def terminal(self):
        return self.states[-1]

    def alive(self, k):
        """Mask of paths whose transition k -> k+1 is before their exit."""
        if self.exit_index is None:
            return np.ones(self.paths, dtype=bool)
        return (self.exit_index == NO_EXIT) | (k < self.exit_index)

    @property
    def exited(self):
        if self.exit_index is None:
            return np.zeros(self.paths, dtype=bool)
        return self.exit_index != NO_EXIT

    @property
    def truncation_fraction(self):
        return float(1.0 - np.mean(self.exited))

    @property
    def exit_times(self):
        """Exit time per path, ``nan`` for paths still inside at the horizon."""
        if self.exit_index is None:
            return np.full(self.paths, np.nan)
        t = np.full(self.paths, np.nan)
        ok = self.exited
        t[ok] = self.times[self.exit_index[ok]]
        return t

    def to_csv(self, path):
        n = self.dimension
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "step", "time"] + [f"x_{i + 1}" for i in range(n)])
            for m in range(self.paths):
                for k in range(self.steps + 1):
                    w.writerow([m, k, repr(float(self.times[k]))]
                               + [repr(float(v)) for v in self.states[k, m]])


def _euler(diffusion, start, horizon, steps, seed, stream, step_offset, region):
    if not horizon > 0:
        raise ConfigError("horizon T must be positive")
    if steps < 1:
        raise ConfigError("steps N must be >= 1")
    start = np.asarray(start, dtype=np.float64)
    m, n = start.shape
    if m < 1:
        raise ConfigError("paths M must be >= 1")
    if n != diffusion.dimension:
        raise ConfigError(f"start states have dimension {n}, diffusion has {diffusion.dimension}")
    dt = horizon / steps
    times = np.arange(steps + 1) * horizon / steps
    times[-1] = horizon
    states = np.empty((steps + 1, m, n))
    incs = np.empty((steps, m, n))
    states[0] = start
    exit_index = None
    if region is not None:
        exit_index = np.full(m, NO_EXIT, dtype=np.int64)
        out0 = region.outside(start)
        exit_index[out0] = 0
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(steps):
            x = states[k]
            db = brownian_increments(seed, stream, step_offset + k, m, n, dt)
            incs[k] = db
            nxt = x + diffusion.b(x) * dt + np.einsum("mij,mj->mi", diffusion.sigma(x), db)
            bad = ~np.all(np.isfinite(nxt), axis=1)
            if np.any(bad):
                raise SimulationError("non-finite state", int(np.argmax(bad)), k)
            if exit_index is not None:
                frozen = exit_index != NO_EXIT
                nxt[frozen] = x[frozen]
                newly = ~frozen & region.outside(nxt)
                exit_index[newly] = k + 1
            states[k + 1] = nxt
    return times, states, incs, exit_index


def _freeze(arr):
    arr.setflags(write=False)
    return arr


def simulate(diffusion: DiffusionSpec, x, horizon, steps, paths, seed, *, stream=0,
             region=None) -> PathBundle:
    """Simulate ``paths`` Euler paths from the common start ``x``.

    With ``region`` given, paths are frozen at their first state outside it
    (equivalent to ``mark_exit`` on the unfrozen bundle, without the copy).
    """
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    start = np.broadcast_to(x, (int(paths), diffusion.dimension))
    times, states, incs, exit_index = _euler(
        diffusion, start, horizon, int(steps), seed, stream, 0, region)
    return PathBundle(_freeze(times), _freeze(states), _freeze(incs), int(seed), int(stream), 0,
                      diffusion, None if exit_index is None else _freeze(exit_index))


def restart(bundle: PathBundle, from_states, *, horizon=None, steps=None, stream=None,
            step_offset=0, region=None) -> PathBundle:
    """New bundle starting path ``m`` at ``from_states[m]``.

    The default ``stream`` is one past the parent's, so increments are fresh.
    Passing the parent's stream with ``step_offset`` equal to the number of
    steps already taken replays the parent's increment stream instead.
    """
    from_states = np.asarray(from_states, dtype=np.float64)
    if from_states.ndim == 1:
        from_states = from_states.reshape(-1, 1) if bundle.dimension == 1 else from_states[None, :]
    if from_states.shape[1] != bundle.dimension:
        raise ConfigError(
            f"restart states have dimension {from_states.shape[1]}, bundle has {bundle.dimension}")
    horizon = bundle.times[-1] if horizon is None else horizon
    steps = bundle.steps if steps is None else int(steps)
    stream = bundle.stream + 1 if stream is None else int(stream)
    times, states, incs, exit_index = _euler(
        bundle.diffusion, from_states, horizon, steps, bundle.seed, stream, step_offset, region)
    return PathBundle(_freeze(times), _freeze(states), _freeze(incs), bundle.seed, stream,
                      step_offset, bundle.diffusion,
                      None if exit_index is None else _freeze(exit_index))


def mark_exit(bundle: PathBundle, center=None, radius=None, *, region=None) -> PathBundle:
    """Mark the first grid index outside the ball (or ``region``) and freeze later states."""
    if region is None:
        if radius is None or not np.all(np.asarray(radius) > 0):
            raise ConfigError("radius must be positive")
        region = Ball(np.atleast_1d(np.asarray(center, dtype=np.float64)), radius)
    m = bundle.paths
    outside = np.stack([region.outside(bundle.states[k]) for k in range(bundle.steps + 1)])
    hit = outside.any(axis=0)
    first = np.argmax(outside, axis=0)
    exit_index = np.where(hit, first, NO_EXIT).astype(np.int64)
    states = bundle.states.copy()
    idx = np.nonzero(hit)[0]
    for k in range(1, bundle.steps + 1):
        late = idx[first[idx] < k]
        states[k, late] = states[first[late], late]
    return dataclasses.replace(bundle, states=_freeze(states), exit_index=_freeze(exit_index))
