"""Least-squares conditional expectations on simulated states.

Fits are in-sample: a ``Projector`` is built from the regression features of
the current time step and maps any target array to its fitted values at the
same sample points.  Every fit contains a constant per bin (or globally), so
the sample mean of the fitted values equals the sample mean of the targets,
and constant targets are reproduced exactly.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations_with_replacement
from typing import Optional

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class RegressionConfig:
    """``kind="bins"``: equal-count hypercube bins with a local fit of degree
    ``local_degree`` (0 = bin mean, 1 = affine).  ``kind="poly"``: one global
    polynomial of total degree ``poly_degree`` (at most 4)."""
    kind: str = "bins"
    bins_per_dim: Optional[int] = None
    samples_per_bin: int = 1000
    max_bins_per_dim: int = 200
    min_count: int = 10
    local_degree: int = 1
    poly_degree: int = 3

    def __post_init__(self):
        if self.kind not in ("bins", "poly"):
            raise ConfigError(f"unknown regression kind {self.kind!r}")
        if self.local_degree not in (0, 1):
            raise ConfigError("local_degree must be 0 or 1")
        if not 0 <= self.poly_degree <= 4:
            raise ConfigError("poly_degree must be between 0 and 4")
        if self.min_count < 1 or self.samples_per_bin < 1:
            raise ConfigError("bin counts must be positive")

    def bins_for(self, samples, dims):
        if self.bins_per_dim is not None:
            return max(1, int(self.bins_per_dim))
        per_dim = (samples / self.samples_per_bin) ** (1.0 / max(dims, 1))
        return int(np.clip(round(per_dim), 1, self.max_bins_per_dim))


def _compact(flat, size):
    """Relabel occupied cells 0..B-1 (in cell order) without sorting."""
    counts = np.bincount(flat, minlength=size)
    occupied = counts > 0
    remap = np.cumsum(occupied) - 1
    return remap[flat], counts[occupied]


def _bin_labels(features, nb, min_count):
    m, d = features.shape
    flat = np.zeros(m, dtype=np.int64)
    pos = (np.arange(1, nb) * m) // nb
    for j in range(d):
        col = features[:, j]
        edges = np.unique(np.sort(col)[pos]) if nb > 1 else np.empty(0)
        flat = flat * nb + np.searchsorted(edges, col, side="right")
    labels, counts = _compact(flat, nb ** d)
    merged = 0
    if len(counts) > 1 and np.any(counts < min_count):
        # merge runs of sparse cells with their successor in lexicographic order
        group = np.empty(len(counts), dtype=np.int64)
        g, acc = 0, 0
        for b, c in enumerate(counts):
            group[b] = g
            acc += c
            if acc >= min_count:
                g += 1
                acc = 0
        if acc and g > 0:
            group[group == g] = g - 1
        merged = len(counts) - (int(group.max()) + 1)
        labels = group[labels]
    return labels, merged


class Projector:
    def __init__(self, features, config: RegressionConfig):
        features = np.asarray(features, dtype=np.float64)
        if features.ndim == 1:
            features = features[:, None]
        self.features = features
        self.config = config
        self.merged_bins = 0
        m, d = features.shape
        if config.kind == "bins":
            nb = config.bins_for(m, d)
            self.labels, self.merged_bins = _bin_labels(features, nb, config.min_count)
            self.nbins = int(self.labels.max()) + 1 if m else 0
            self.counts = np.bincount(self.labels, minlength=self.nbins).astype(np.float64)
            # one member of each bin, used as a shift so constants are exact
            self.first = np.empty(self.nbins, dtype=np.int64)
            self.first[self.labels] = np.arange(m)
            if config.local_degree == 1:
                self._prepare_affine()
        else:
            self._prepare_poly()

    # -- bins
    def _bsum(self, v):
        return np.bincount(self.labels, weights=v, minlength=self.nbins)

    def _prepare_affine(self):
        x = self.features
        d = x.shape[1]
        # shift by a bin member first so identical features centre to exact zeros
        anchor = x[self.first]
        xs = x - anchor[self.labels]
        mean = np.stack([self._bsum(xs[:, j]) for j in range(d)], axis=1) / self.counts[:, None]
        xc = xs - mean[self.labels]
        sxx = np.empty((self.nbins, d, d))
        for i in range(d):
            for j in range(i, d):
                sxx[:, i, j] = sxx[:, j, i] = self._bsum(xc[:, i] * xc[:, j])
        scale = np.trace(sxx, axis1=1, axis2=2) / d
        ridge = 1e-10 * scale + 1e-300
        self.sxx = sxx + ridge[:, None, None] * np.eye(d)
        # bins whose spread is at rounding level keep a constant fit
        magnitude = 1.0 + np.max(np.abs(anchor), axis=1)
        self.flat_bins = scale / self.counts <= (1e-9 * magnitude) ** 2
        self.xc = xc

    def _project_bins(self, t):
        shift = t[self.first]
        dev = t - shift[self.labels]
        mean = shift + self._bsum(dev) / self.counts
        fitted = mean[self.labels]
        if self.config.local_degree == 1:
            d = self.xc.shape[1]
            sxt = np.stack([self._bsum(self.xc[:, j] * dev) for j in range(d)], axis=1)
            beta = np.linalg.solve(self.sxx, sxt[:, :, None])[:, :, 0]
            beta[self.flat_bins] = 0.0
            fitted = fitted + np.einsum("md,md->m", self.xc, beta[self.labels])
        return fitted

    # -- global polynomial
    def _prepare_poly(self):
        x = self.features
        mu = x.mean(axis=0)
        sd = x.std(axis=0)
        sd[sd == 0] = 1.0
        z = (x - mu) / sd
        cols = [np.ones(len(x))]
        d = x.shape[1]
        for deg in range(1, self.config.poly_degree + 1):
            for combo in combinations_with_replacement(range(d), deg):
                c = np.ones(len(x))
                for j in combo:
                    c = c * z[:, j]
                cols.append(c)
        basis = np.stack(cols, axis=1)
        keep = [0] + [i for i in range(1, basis.shape[1]) if np.ptp(basis[:, i]) > 0]
        self.basis = basis[:, keep]

    def _project_poly(self, t):
        shift = t[0]
        dev = t - shift
        if not np.any(dev):
            return np.full_like(t, shift)
        coef, *_ = np.linalg.lstsq(self.basis, dev, rcond=None)
        return shift + self.basis @ coef

    def project(self, targets):
        """Fitted conditional expectation of ``targets`` (shape ``(m,)`` or ``(m, q)``)."""
        t = np.asarray(targets, dtype=np.float64)
        proj = self._project_bins if self.config.kind == "bins" else self._project_poly
        if t.ndim == 1:
            return proj(t)
        return np.stack([proj(t[:, j]) for j in range(t.shape[1])], axis=1)


def conditional_expectation(features, targets, config: RegressionConfig = RegressionConfig()):
    return Projector(features, config).project(targets)
