"""Problem data: diffusions, drivers and scalar fields, with sampled hypothesis checks.

All callables are vectorized over a leading sample axis:

* ``DiffusionSpec.drift(x)``      ``(m, n) -> (m, n)``
* ``DiffusionSpec.diffusion(x)``  ``(m, n) -> (m, n, n)``
* ``Driver.g(y, z)``              ``(m,), (m, n) -> (m,)``
* ``ScalarField.f(x)``            ``(m, n) -> (m,)``
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import expr as _expr
from .errors import ConfigError, EvaluationError

H1_ZERO_TOL = 1e-12


@dataclass(frozen=True)
class DiffusionSpec:
    dimension: int
    drift: Callable[[np.ndarray], np.ndarray]
    diffusion: Callable[[np.ndarray], np.ndarray]
    lipschitz_bound: float = 0.0
    name: str = "custom"

    def b(self, x):
        x = _as_points(x, self.dimension)
        return np.broadcast_to(self.drift(x), x.shape).astype(np.float64, copy=False)

    def sigma(self, x):
        x = _as_points(x, self.dimension)
        n = self.dimension
        return np.broadcast_to(self.diffusion(x), (x.shape[0], n, n)).astype(
            np.float64, copy=False
        )

    def covariance(self, x):
        s = self.sigma(x)
        return s @ np.swapaxes(s, 1, 2)


@dataclass(frozen=True)
class Driver:
    g: Callable[[np.ndarray, np.ndarray], np.ndarray]
    dimension: int = 1
    satisfies_h1: bool = False
    lipschitz_estimate: float = float("nan")
    mu_hint: Optional[Mapping[str, float]] = None
    name: str = "custom"

    def __call__(self, y, z):
        y = np.asarray(y, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64).reshape(y.shape[0] if y.ndim else 1, -1)
        y = np.atleast_1d(y)
        return np.array(np.broadcast_to(self.g(y, z), y.shape), dtype=np.float64)


@dataclass(frozen=True)
class ScalarField:
    f: Callable[[np.ndarray], np.ndarray]
    dimension: int = 1
    growth_degree: int = 0
    name: str = "custom"

    def __call__(self, x):
        x = _as_points(x, self.dimension)
        return np.array(np.broadcast_to(self.f(x), (x.shape[0],)), dtype=np.float64)


def _as_points(x, n):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        x = x.reshape(-1, n) if n > 1 else x.reshape(-1, 1)
    if x.shape[1] != n:
        raise ConfigError(f"expected points in R^{n}, got shape {x.shape}")
    return x


# ---------------------------------------------------------------- catalog

def zero_driver(dimension=1):
    return Driver(lambda y, z: np.zeros_like(y), dimension, True, 0.0, {}, "zero")


def linear_driver(alpha, dimension=1):
    """g(y, z) = alpha . z"""
    a = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (dimension,)).copy()
    return Driver(
        lambda y, z: z @ a,
        dimension,
        True,
        float(np.linalg.norm(a)),
        {"alpha": alpha},
        "linear",
    )


def kappa_driver(mu, dimension=1):
    """g(y, z) = mu |z|; negative mu gives the concave (lower) counterpart."""
    mu = float(mu)
    if dimension == 1:
        g = lambda y, z: mu * np.abs(z[:, 0])
    else:
        g = lambda y, z: mu * np.sqrt(np.sum(z * z, axis=1))
    return Driver(g, dimension, True, abs(mu), {"mu": mu}, "kappa")


def brownian(dimension=1):
    eye = np.eye(dimension)
    return DiffusionSpec(
        dimension,
        lambda x: np.zeros_like(x),
        lambda x: np.broadcast_to(eye, (x.shape[0], dimension, dimension)),
        0.0,
        "brownian",
    )


def constant_coefficients(b, sigma, dimension=1):
    b = np.broadcast_to(np.asarray(b, dtype=np.float64), (dimension,)).copy()
    s = np.asarray(sigma, dtype=np.float64)
    s = s * np.eye(dimension) if s.ndim < 2 else s.reshape(dimension, dimension)
    return DiffusionSpec(
        dimension,
        lambda x: np.broadcast_to(b, x.shape),
        lambda x: np.broadcast_to(s, (x.shape[0], dimension, dimension)),
        0.0,
        "constant",
    )


def ornstein_uhlenbeck(theta, mean=0.0, sigma=1.0, dimension=1):
    """Affine mean-reverting drift theta (mean - x) with constant sigma."""
    theta = float(theta)
    m = np.broadcast_to(np.asarray(mean, dtype=np.float64), (dimension,)).copy()
    s = float(sigma) * np.eye(dimension)
    return DiffusionSpec(
        dimension,
        lambda x: theta * (m - x),
        lambda x: np.broadcast_to(s, (x.shape[0], dimension, dimension)),
        abs(theta),
        "ou",
    )


def linear_field(a=1.0, c=0.0, dimension=1):
    a = np.broadcast_to(np.asarray(a, dtype=np.float64), (dimension,)).copy()
    return ScalarField(lambda x: x @ a + c, dimension, 1, "linear")


def quadratic_field(a=1.0, c=0.0, dimension=1):
    return ScalarField(lambda x: a * np.sum(x * x, axis=1) + c, dimension, 2, "quadratic")


def exp_profile(mu, dimension=1):
    """f(x) = -exp(-2 mu x_1); g-harmonic for g = mu|z| under Brownian motion."""
    mu = float(mu)
    return ScalarField(lambda x: -np.exp(-2 * mu * x[:, 0]), dimension, 0, "exp_profile")


def constant_field(c, dimension=1):
    c = float(c)
    return ScalarField(lambda x: np.full(x.shape[0], c), dimension, 0, "constant")


def sine_field(k=1.0, dimension=1):
    k = float(k)
    return ScalarField(lambda x: np.sin(k * x[:, 0]), dimension, 0, "sine")


DRIVERS = {"zero": zero_driver, "linear": linear_driver, "kappa": kappa_driver}
DIFFUSIONS = {
    "brownian": brownian,
    "constant": constant_coefficients,
    "ou": ornstein_uhlenbeck,
}
FIELDS = {
    "linear": linear_field,
    "quadratic": quadratic_field,
    "exp_profile": exp_profile,
    "constant": constant_field,
    "sine": sine_field,
}

# textual equivalents of catalog formulas, used to cross-check the parser
CATALOG_FORMULAS = {
    ("driver", "zero"): "0",
    ("driver", "linear"): "alpha*z1",
    ("driver", "kappa"): "mu*abs(z1)",
    ("field", "linear"): "a*x1 + c",
    ("field", "quadratic"): "a*x1^2 + c",
    ("field", "exp_profile"): "-exp(-2*mu*x1)",
    ("field", "constant"): "c",
    ("field", "sine"): "sin(k*x1)",
}


def from_catalog(kind: str, name: str, params: Optional[Mapping] = None, dimension: int = 1):
    tables = {"driver": DRIVERS, "diffusion": DIFFUSIONS, "field": FIELDS}
    try:
        factory = tables[kind][name]
    except KeyError:
        raise ConfigError(f"unknown {kind} catalog entry {name!r}") from None
    try:
        return factory(**dict(params or {}), dimension=dimension)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for {kind} {name!r}: {exc}") from None


# ------------------------------------------------------- expression-backed

def _coord_bindings(prefix, arr):
    return {f"{prefix}{i + 1}": arr[:, i] for i in range(arr.shape[1])}


def _checked(values, what, points):
    values = np.asarray(values, dtype=np.float64)
    bad = ~np.isfinite(values)
    if np.any(bad):
        idx = np.argwhere(bad)[0]
        raise EvaluationError(f"non-finite {what}", np.asarray(points)[idx[0]].tolist())
    return values


def driver_from_expr(source: str, params: Optional[Mapping] = None, dimension: int = 1):
    e = _expr.parse(source)
    params = dict(params or {})

    def g(y, z):
        env = {"y": y, **_coord_bindings("z", z), **params}
        return np.broadcast_to(e.evaluate(env), y.shape)

    return Driver(g, dimension, False, float("nan"), params, source)


def field_from_expr(source: str, params: Optional[Mapping] = None, dimension: int = 1,
                    growth_degree: int = 0):
    e = _expr.parse(source)
    params = dict(params or {})

    def f(x):
        env = {**_coord_bindings("x", x), **params}
        return np.broadcast_to(e.evaluate(env), (x.shape[0],))

    return ScalarField(f, dimension, growth_degree, source)


def diffusion_from_expr(drift: Sequence[str], diffusion: Sequence[Sequence[str]],
                        params: Optional[Mapping] = None, lipschitz_bound: float = 0.0):
    n = len(drift)
    if len(diffusion) != n or any(len(row) != n for row in diffusion):
        raise ConfigError(f"diffusion matrix must be {n}x{n}")
    b_exprs = [_expr.parse(s) for s in drift]
    s_exprs = [[_expr.parse(s) for s in row] for row in diffusion]
    params = dict(params or {})

    def b(x):
        env = {**_coord_bindings("x", x), **params}
        return np.stack([np.broadcast_to(e.evaluate(env), (x.shape[0],)) for e in b_exprs], axis=1)

    def s(x):
        env = {**_coord_bindings("x", x), **params}
        out = np.empty((x.shape[0], n, n))
        for i in range(n):
            for j in range(n):
                out[:, i, j] = s_exprs[i][j].evaluate(env)
        return out

    return DiffusionSpec(n, b, s, lipschitz_bound, "expression")


# -------------------------------------------------------------- validation

@dataclass
class ValidationReport:
    check: str
    verdict: str  # "pass" | "warn" | "fail"
    metrics: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    subject: object = None

    @property
    def passed(self):
        return self.verdict != "fail"


def _sample_box(rng, lo, hi, m, n):
    lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), (n,))
    hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), (n,))
    return lo + (hi - lo) * rng.random((m, n))


def _lipschitz_quotient(num, den):
    ok = den > 1e-9
    return float(np.max(num[ok] / den[ok])) if np.any(ok) else 0.0


def validate_h1(driver: Driver, y_grid, *, z_scale=3.0, samples=4000, seed=0):
    """Check g(y, 0) = 0 on ``y_grid`` and estimate the Lipschitz constant of g."""
    y_grid = np.asarray(y_grid, dtype=np.float64).ravel()
    if y_grid.size == 0:
        raise ConfigError("y_grid must be nonempty")
    n = driver.dimension
    g0 = _checked(driver(y_grid, np.zeros((y_grid.size, n))), "g(y, 0)", y_grid)
    max_g0 = float(np.max(np.abs(g0)))

    rng = np.random.default_rng(seed)
    lo, hi = float(y_grid.min()), float(y_grid.max())
    if hi - lo < 1e-12:
        lo, hi = lo - 1.0, hi + 1.0
    y1 = _sample_box(rng, lo, hi, samples, 1)[:, 0]
    y2 = _sample_box(rng, lo, hi, samples, 1)[:, 0]
    z1 = _sample_box(rng, -z_scale, z_scale, samples, n)
    z2 = _sample_box(rng, -z_scale, z_scale, samples, n)
    # half of the pairs are near-neighbours to catch steep local slopes
    near = samples // 2
    y2[:near] = y1[:near] + 1e-3 * (y2[:near] - y1[:near])
    z2[:near] = z1[:near] + 1e-3 * (z2[:near] - z1[:near])
    g1 = _checked(driver(y1, z1), "g", np.column_stack([y1, z1]))
    g2 = _checked(driver(y2, z2), "g", np.column_stack([y2, z2]))
    den = np.abs(y1 - y2) + np.linalg.norm(z1 - z2, axis=1)
    lip = _lipschitz_quotient(np.abs(g1 - g2), den)

    ok = max_g0 <= H1_ZERO_TOL
    updated = dataclasses.replace(driver, satisfies_h1=ok, lipschitz_estimate=lip)
    return ValidationReport(
        "H1",
        "pass" if ok else "fail",
        {"max_abs_g_y0": max_g0, "lipschitz_estimate": lip},
        [] if ok else [f"max |g(y,0)| = {max_g0:.3g} exceeds {H1_ZERO_TOL}"],
        updated,
    )


@dataclass(frozen=True)
class H2Box:
    """Sampling box for (x, u, p) in R^n x R x R^n; bounds apply per coordinate."""
    x: tuple = (-1.0, 1.0)
    u: tuple = (-1.0, 1.0)
    p: tuple = (-1.0, 1.0)

    def scaled(self, factor):
        def s(iv):
            c = 0.5 * (iv[0] + iv[1])
            r = 0.5 * (iv[1] - iv[0]) * factor
            return (c - r, c + r)
        return H2Box(s(self.x), s(self.u), s(self.p))


def _h2_stats(driver, diffusion, box, samples, rng):
    n = diffusion.dimension
    x = _sample_box(rng, *box.x, samples, n)
    u = _sample_box(rng, *box.u, samples, 1)[:, 0]
    p = _sample_box(rng, *box.p, samples, n)
    sig = diffusion.sigma(x)

    def F(uu, pp):
        return _checked(driver(uu, np.einsum("mi,mij->mj", pp, sig)), "F(u,p)", x)

    f0 = F(u, p)
    growth = float(np.max(np.abs(f0) / (1 + np.abs(u) + np.linalg.norm(p, axis=1))))
    hu = 1e-6 * (1 + np.abs(u))
    du = (F(u + hu, p) - F(u - hu, p)) / (2 * hu)
    dp = np.empty((samples, n))
    for j in range(n):
        hp = 1e-6 * (1 + np.abs(p[:, j]))
        e = np.zeros(n)
        e[j] = 1.0
        dp[:, j] = (F(u, p + hp[:, None] * e) - F(u, p - hp[:, None] * e)) / (2 * hp)
    return growth, float(np.max(np.abs(du))), float(np.max(np.linalg.norm(dp, axis=1)))


def validate_h2(driver: Driver, diffusion: DiffusionSpec, sample_box: H2Box = H2Box(), *,
                samples=4000, growth_factor=4.0, seed=0):
    """Sampled bounds for F(u,p) = g(u, p sigma(x)) and its partial derivatives.

    The same statistics are recomputed on the box enlarged by ``growth_factor``;
    a derivative bound that keeps growing with the box is flagged.
    """
    for lo, hi in (sample_box.x, sample_box.u, sample_box.p):
        if not hi > lo:
            raise ConfigError("sample_box must have positive volume")
    rng = np.random.default_rng(seed)
    g1, du1, dp1 = _h2_stats(driver, diffusion, sample_box, samples, rng)
    g2, du2, dp2 = _h2_stats(driver, diffusion, sample_box.scaled(growth_factor), samples, rng)
    metrics = {
        "growth_bound": g1,
        "du_bound": du1,
        "dp_bound": dp1,
        "growth_bound_wide": g2,
        "du_bound_wide": du2,
        "dp_bound_wide": dp2,
    }
    warnings = []
    for label, a, b in (("|F|/(1+|u|+|p|)", g1, g2), ("|D_u F|", du1, du2), ("|D_p F|", dp1, dp2)):
        if b > 2.0 * a + 1e-6:
            warnings.append(f"{label} grows with the sampling box: {a:.4g} -> {b:.4g}")
    return ValidationReport("H2", "fail" if warnings else "pass", metrics, warnings, driver)


def validate_h3(field_: ScalarField, domain_box, growth_degree=None, *, samples=4000, seed=0,
                wide_factor=4.0):
    """Fit K with |f(x)| <= K (1 + |x|^degree) on the box.

    K is refitted on the box enlarged ``wide_factor`` times about its centre;
    more than doubling there means the degree is too small.
    """
    lo, hi = (np.asarray(b, dtype=np.float64) for b in domain_box)
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ConfigError("domain_box must be finite")
    degree = field_.growth_degree if growth_degree is None else growth_degree
    n = field_.dimension
    rng = np.random.default_rng(seed)

    def fit(lo_, hi_):
        pts = _sample_box(rng, lo_, hi_, samples, n)
        # include the corners, where polynomial growth is tightest
        corners = np.array(np.meshgrid(*[[a, b] for a, b in zip(
            np.broadcast_to(lo_, (n,)), np.broadcast_to(hi_, (n,)))])).reshape(n, -1).T
        pts = np.vstack([pts, corners])
        vals = _checked(field_(pts), "f(x)", pts)
        return float(np.max(np.abs(vals) / (1 + np.linalg.norm(pts, axis=1) ** degree)))

    k_full = fit(lo, hi)
    mid = 0.5 * (lo + hi)
    k_wide = fit(mid - wide_factor * 0.5 * (hi - lo), mid + wide_factor * 0.5 * (hi - lo))
    warnings = []
    if k_wide > 2.0 * k_full + 1e-12:
        warnings.append(
            f"growth constant rises with the box ({k_full:.4g} -> {k_wide:.4g} on the "
            f"{wide_factor:g}x box); degree {degree} may be too small"
        )
    return ValidationReport(
        "H3",
        "warn" if warnings else "pass",
        {"K": k_full, "K_wide_box": k_wide, "degree": degree},
        warnings,
        field_,
    )


def validate_diffusion(diffusion: DiffusionSpec, domain_box, *, samples=2000, seed=0):
    """Finite evaluation and sampled Lipschitz quotient of (b, sigma) on a box."""
    lo, hi = domain_box
    n = diffusion.dimension
    rng = np.random.default_rng(seed)
    x1 = _sample_box(rng, lo, hi, samples, n)
    x2 = _sample_box(rng, lo, hi, samples, n)
    b1 = _checked(diffusion.b(x1), "drift", x1)
    b2 = _checked(diffusion.b(x2), "drift", x2)
    s1 = _checked(diffusion.sigma(x1), "diffusion", x1)
    s2 = _checked(diffusion.sigma(x2), "diffusion", x2)
    num = np.linalg.norm(b1 - b2, axis=1) + np.linalg.norm((s1 - s2).reshape(samples, -1), axis=1)
    lip = _lipschitz_quotient(num, np.linalg.norm(x1 - x2, axis=1))
    cov = s1 @ np.swapaxes(s1, 1, 2)
    min_eig = float(np.min(np.linalg.eigvalsh(cov)))
    warnings = []
    if lip > 10 * diffusion.lipschitz_bound + 1e-12:
        warnings.append(
            f"sampled Lipschitz quotient {lip:.4g} exceeds 10x the declared bound "
            f"{diffusion.lipschitz_bound:.4g}"
        )
    return ValidationReport(
        "diffusion",
        "warn" if warnings else "pass",
        {"lipschitz_estimate": lip, "min_eig_sigma_sigma_t": min_eig},
        warnings,
        diffusion,
    )


def min_ellipticity(diffusion: DiffusionSpec, points) -> float:
    """Smallest eigenvalue of sigma sigma^T over ``points``."""
    return float(np.min(np.linalg.eigvalsh(diffusion.covariance(points))))
