"""Explicit monotone finite differences for u_t = L u + g(u, u_x sigma), u(0, .) = f.

L u = b . grad u + 1/2 tr(sigma sigma^T D^2 u) on a uniform 1-d or 2-d grid.
Drift terms are upwinded, second derivatives use central differences (with
the positive-coefficient cross stencil in 2-d), and the gradient fed to the
driver is central.  Under the step restriction recorded in the field's
``certificate`` the one-step map is nondecreasing in every nodal value, so
the discrete solution operator is order preserving.

The terminal-value form v_t + L v + g(v, v_x sigma) = 0, v(T, .) = f, is the
same problem run backwards: v(t, x) = u(T - t, x).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ComparisonViolation, ConfigError, EvaluationError, SolverError
from .model import DiffusionSpec, Driver, ScalarField


@dataclass
class GridField:
    axes: Optional[tuple]
    values: np.ndarray  # (T, *shape) when ``times`` is set, else (*shape)
    times: Optional[np.ndarray] = None
    h: float = float("nan")
    dt: float = float("nan")
    certificate: dict = field(default_factory=dict)
    points: Optional[np.ndarray] = None
    boundary_kind: str = "dirichlet"

    def nodes(self):
        if self.points is not None:
            return self.points
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def slice_at(self, t):
        """Values at the recorded time closest to ``t``."""
        k = int(np.argmin(np.abs(self.times - t)))
        return self.values[k]

    def interpolate(self, points, t=None):
        vals = self.values if self.times is None else self.slice_at(t)
        points = np.asarray(points, dtype=np.float64)
        if len(self.axes) == 1:
            return np.interp(points.reshape(-1), self.axes[0], vals)
        from scipy.interpolate import RegularGridInterpolator
        return RegularGridInterpolator(self.axes, vals)(points.reshape(-1, len(self.axes)))

    def to_csv(self, path):
        nodes = self.nodes()
        n = nodes.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time"] + [f"x_{i + 1}" for i in range(n)] + ["value"])
            slices = [(None, self.values)] if self.times is None else zip(self.times, self.values)
            for t, v in slices:
                for node, val in zip(nodes, np.ravel(v)):
                    w.writerow(["" if t is None else repr(float(t))]
                               + [repr(float(c)) for c in node] + [repr(float(val))])


def make_axes(box, h):
    lo, hi = (np.atleast_1d(np.asarray(b, dtype=np.float64)) for b in box)
    if lo.shape != hi.shape or np.any(hi <= lo):
        raise ConfigError("box must satisfy hi > lo")
    if lo.size > 2:
        raise ConfigError("grids are limited to 1 or 2 space dimensions")
    if not h > 0:
        raise ConfigError("spacing h must be positive")
    axes = []
    for a, b in zip(lo, hi):
        k = int(round((b - a) / h))
        if k < 2 or abs(k * h - (b - a)) > 1e-9 * max(1.0, abs(b - a)):
            raise ConfigError(f"box side [{a}, {b}] is not a multiple of h={h}")
        axes.append(a + h * np.arange(k + 1))
    return tuple(axes)


def _grid_points(axes):
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


class Stepper:
    """One explicit step of the monotone scheme on fixed axes."""

    def __init__(self, diffusion: DiffusionSpec, driver: Driver, axes, dt):
        self.diffusion = diffusion
        self.driver = driver
        self.axes = axes
        self.dt = float(dt)
        self.d = len(axes)
        if diffusion.dimension != self.d:
            raise ConfigError(f"grid has {self.d} axes, diffusion has dimension {diffusion.dimension}")
        hs = [ax[1] - ax[0] for ax in axes]
        if max(hs) - min(hs) > 1e-12 * max(hs):
            raise ConfigError("all axes must share one spacing h")
        self.h = float(hs[0])
        self.shape = tuple(len(ax) for ax in axes)
        interior = tuple(slice(1, -1) for _ in axes)
        self.interior = interior
        pts = _grid_points(axes).reshape(*self.shape, self.d)[interior].reshape(-1, self.d)
        self.b = diffusion.b(pts).reshape(*[s - 2 for s in self.shape], self.d)
        self.sigma = diffusion.sigma(pts)
        self.a = (self.sigma @ np.swapaxes(self.sigma, 1, 2)).reshape(
            *[s - 2 for s in self.shape], self.d, self.d)
        self.certificate = self._certify()

    def _certify(self):
        h = self.h
        lip = self.driver.lipschitz_estimate
        if not np.isfinite(lip):
            raise ConfigError("driver needs a finite Lipschitz estimate (run validate_h1)")
        a, b = self.a, self.b
        diag = np.stack([a[..., i, i] for i in range(self.d)], axis=-1)
        cross = np.abs(a[..., 0, 1]) if self.d == 2 else np.zeros(diag.shape[:-1])
        # coefficient of the centre node must stay nonnegative
        centre_rate = (diag.sum(-1) - cross) / h**2 + np.abs(b).sum(-1) / h + lip
        dt_max = float(1.0 / np.max(centre_rate)) if np.max(centre_rate) > 0 else np.inf
        max_cov = float(np.max(np.linalg.norm(a, ord=2, axis=(-2, -1))))
        dt_stated = h**2 / (max_cov + h * float(np.max(np.abs(b))) + h**2 * lip) \
            if max_cov + np.max(np.abs(b)) + lip > 0 else np.inf
        # neighbour coefficients: 1/2 a_ii/h^2 - |a_ij|/(2h^2) - |dg/dz| |(sigma)_i|/(2h) >= 0
        sig_row = np.linalg.norm(self.sigma, axis=2).reshape(diag.shape)
        neigh = 0.5 * (diag - cross[..., None]) / h**2 - lip * sig_row / (2 * h)
        peclet_ok = bool(np.all(neigh >= -1e-12))
        diag_dom = bool(np.all(diag - cross[..., None] >= -1e-12))
        return {
            "dt": self.dt,
            "dt_max_monotone": dt_max,
            "dt_max_stated": float(dt_stated),
            "peclet_ok": peclet_ok,
            "diagonally_dominant": diag_dom,
            "monotone": bool(self.dt <= dt_max * (1 + 1e-12) and peclet_ok and diag_dom),
            "driver_lipschitz": float(lip),
        }

    def _shift(self, u, axis, s):
        """u at interior nodes shifted by s in {-1, 0, +1} along ``axis``."""
        idx = [slice(1, -1)] * self.d
        n = u.shape[axis]
        idx[axis] = slice(1 + s, n - 1 + s)
        return u[tuple(idx)]

    def _shift2(self, u, s0, s1):
        n0, n1 = u.shape
        return u[1 + s0:n0 - 1 + s0, 1 + s1:n1 - 1 + s1]

    def operator(self, u):
        """(L_h u + g(u, D_h u sigma)) at interior nodes."""
        h = self.h
        c = u[self.interior]
        grad = np.empty(c.shape + (self.d,))
        lu = np.zeros_like(c)
        for i in range(self.d):
            up = self._shift(u, i, +1)
            dn = self._shift(u, i, -1)
            grad[..., i] = (up - dn) / (2 * h)
            bi = self.b[..., i]
            lu += np.maximum(bi, 0) * (up - c) / h - np.maximum(-bi, 0) * (c - dn) / h
            lu += 0.5 * self.a[..., i, i] * (up - 2 * c + dn) / h**2
        if self.d == 2:
            a12 = self.a[..., 0, 1]
            s = self._shift2
            side = s(u, 1, 0) + s(u, -1, 0) + s(u, 0, 1) + s(u, 0, -1)
            pos = (2 * c + s(u, 1, 1) + s(u, -1, -1) - side) / (2 * h**2)
            neg = -(2 * c + s(u, 1, -1) + s(u, -1, 1) - side) / (2 * h**2)
            lu += a12 * np.where(a12 >= 0, pos, neg)
        z = np.einsum("...i,...ij->...j", grad, self.sigma.reshape(c.shape + (self.d, self.d)))
        gval = self.driver(c.reshape(-1), z.reshape(-1, self.d)).reshape(c.shape)
        return lu + gval

    def __call__(self, u):
        out = u.copy()
        out[self.interior] = u[self.interior] + self.dt * self.operator(u)
        return out


def _march(stepper: Stepper, u0, steps):
    u = u0
    yield 0, u
    with np.errstate(over="ignore", invalid="ignore"):
        for m in range(1, steps + 1):
            u = stepper(u)
            if not np.all(np.isfinite(u)):
                bad = np.unravel_index(np.argmax(~np.isfinite(u)), u.shape)
                raise SolverError(f"non-finite value at node {bad}", m)
            yield m, u


def _initial(f: ScalarField, axes):
    pts = _grid_points(axes)
    vals = f(pts)
    if not np.all(np.isfinite(vals)):
        i = int(np.argmax(~np.isfinite(vals)))
        raise EvaluationError("non-finite initial value", pts[i].tolist())
    return vals.reshape(tuple(len(a) for a in axes))


def parabolic_solve(diffusion: DiffusionSpec, driver: Driver, f: ScalarField, box, T, h, dt,
                    *, max_slices=201) -> GridField:
    """Space-time solution of the initial-value problem on ``box`` up to time ``T``.

    Boundary nodes keep the values of ``f``.  At most ``max_slices`` time
    slices are stored (always including t = 0 and t = T).
    """
    axes = make_axes(box, h)
    steps = int(round(T / dt))
    if steps < 1 or abs(steps * dt - T) > 1e-9 * max(1.0, T):
        raise ConfigError(f"T={T} is not a positive multiple of dt={dt}")
    stepper = Stepper(diffusion, driver, axes, dt)
    cert = stepper.certificate
    if not cert["monotone"]:
        raise ConfigError(f"step restriction violated: {cert}")
    stride = max(1, int(np.ceil(steps / (max_slices - 1))))
    keep = set(range(0, steps + 1, stride)) | {steps}
    times, vals = [], []
    for m, u in _march(stepper, _initial(f, axes), steps):
        if m in keep:
            times.append(m * dt)
            vals.append(u)
    return GridField(axes, np.stack(vals), np.array(times), stepper.h, dt, cert)


def terminal_value_form(solution: GridField, T) -> GridField:
    """Re-index a forward solution as v(t, x) = u(T - t, x) for the terminal-value form."""
    return GridField(solution.axes, solution.values[::-1].copy(), T - solution.times[::-1],
                     solution.h, solution.dt, solution.certificate)


# --------------------------------------------------------------- residuals

def derivatives(f: ScalarField, x, h):
    """Value, gradient and Hessian of f at x by central differences with one
    Richardson level (steps h and h/2)."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    n = x.size

    def fd(step):
        e = np.eye(n) * step
        pts = [x]
        for i in range(n):
            pts += [x + e[i], x - e[i]]
        for i in range(n):
            for j in range(i + 1, n):
                pts += [x + e[i] + e[j], x + e[i] - e[j], x - e[i] + e[j], x - e[i] - e[j]]
        v = f(np.array(pts))
        if not np.all(np.isfinite(v)):
            raise EvaluationError("non-finite value near probe", x.tolist())
        f0 = v[0]
        grad = np.empty(n)
        hess = np.empty((n, n))
        for i in range(n):
            fp, fm = v[1 + 2 * i], v[2 + 2 * i]
            grad[i] = (fp - fm) / (2 * step)
            hess[i, i] = (fp - 2 * f0 + fm) / step**2
        k = 1 + 2 * n
        for i in range(n):
            for j in range(i + 1, n):
                pp, pm, mp, mm = v[k:k + 4]
                hess[i, j] = hess[j, i] = (pp - pm - mp + mm) / (4 * step**2)
                k += 4
        return f0, grad, hess

    f0, g1, h1 = fd(h)
    _, g2, h2 = fd(h / 2)
    return f0, (4 * g2 - g1) / 3, (4 * h2 - h1) / 3


def generator_value(f: ScalarField, diffusion: DiffusionSpec, driver: Driver, x, h):
    """L f(x) + g(f(x), f_x(x) sigma(x)) from finite differences."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    f0, grad, hess = derivatives(f, x, h)
    b = diffusion.b(x[None, :])[0]
    s = diffusion.sigma(x[None, :])[0]
    lf = b @ grad + 0.5 * np.sum((s @ s.T) * hess)
    # derivatives of a constant are exactly zero; keep g(c, 0) exact
    return float(lf + driver(np.array([f0]), (grad @ s)[None, :])[0])


def elliptic_residual(f: ScalarField, diffusion: DiffusionSpec, driver: Driver, probes,
                      h=None) -> GridField:
    """Residual L f + g(f, f_x sigma) at each probe (smooth candidates only).

    ``probes`` is either a sequence of per-axis coordinate arrays (tensor
    grid) or an array of points ``(P, n)``.  Default step: 1e-3 (1 + |x|).
    """
    n = diffusion.dimension
    if isinstance(probes, (list, tuple)) and len(probes) == n and all(
            np.ndim(p) == 1 for p in probes) and n > 1:
        axes = tuple(np.asarray(p, dtype=np.float64) for p in probes)
        pts = _grid_points(axes)
        shape = tuple(len(a) for a in axes)
    else:
        pts = np.asarray(probes, dtype=np.float64).reshape(-1, n)
        axes = (pts[:, 0],) if n == 1 else None
        shape = (len(pts),)
    res = np.empty(len(pts))
    for i, x in enumerate(pts):
        step = 1e-3 * (1 + np.linalg.norm(x)) if h is None else h
        res[i] = generator_value(f, diffusion, driver, x, step)
    return GridField(axes, res.reshape(shape), points=None if axes else pts,
                     h=float("nan") if h is None else h)


@dataclass
class ComparisonResult:
    holds: bool
    min_gap: float
    worst_time: float
    worst_node: tuple
    certificate: dict


def comparison_principle_check(super_field: ScalarField, sub_field: ScalarField,
                               diffusion: DiffusionSpec, driver: Driver, box, T, h, dt, *,
                               hold_super_fixed=False, tol=1e-10) -> ComparisonResult:
    """Evolve both initial data and check super >= sub - tol at every node and step.

    With ``hold_super_fixed`` the upper function is kept as the time-constant
    field f(x), the situation of a g-superharmonic f compared against the
    evolution of its own data.
    """
    axes = make_axes(box, h)
    steps = int(round(T / dt))
    if steps < 1:
        raise ConfigError("T must be at least one step")
    stepper = Stepper(diffusion, driver, axes, dt)
    if not stepper.certificate["monotone"]:
        raise ConfigError(f"step restriction violated: {stepper.certificate}")
    hi0, lo0 = _initial(super_field, axes), _initial(sub_field, axes)
    if np.any(hi0 < lo0):
        raise ConfigError("super_field must dominate sub_field on the initial slice and boundary")
    hi_iter = _march(stepper, hi0, steps)
    lo_iter = _march(stepper, lo0, steps)
    worst = (np.inf, 0.0, ())
    for (m, lo), (_, hi) in zip(lo_iter, hi_iter):
        upper = hi0 if hold_super_fixed else hi
        gap = upper - lo
        i = int(np.argmin(gap))
        g = float(gap.flat[i])
        if g < worst[0]:
            worst = (g, m * dt, tuple(int(v) for v in np.unravel_index(i, gap.shape)))
        if g < -tol:
            node = np.unravel_index(i, gap.shape)
            raise ComparisonViolation(
                f"ordering fails by {-g:.3g} at node {node}, t={m * dt:.6g}",
                {"time": m * dt, "node": tuple(int(v) for v in node)})
    return ComparisonResult(True, worst[0], worst[1], worst[2], stepper.certificate)
