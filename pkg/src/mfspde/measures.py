"""Discrete and empirical measures on the truncated space, 1-D CDFs, and W2.

The probability space is the finite uniform space {0, ..., n-1}: an event is
a set of particle indices and P(A) = |A| / n.
"""

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.optimize import linear_sum_assignment

MERGE_TOL = 1e-12
MAX_ASSIGN = 512


class MeasureError(ValueError):
    pass


def _as_points(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise MeasureError(f"points must be scalars or vectors, got shape {x.shape}")
    return x


def _merge(points, weights, tol=MERGE_TOL):
    """Sort lexicographically and merge points closer than ``tol`` (sup-norm).

    Returns (atoms, weights, inverse) with ``inverse[j]`` the atom of point j.
    """
    order = np.lexsort(points.T[::-1])
    p = points[order]
    w = weights[order]
    if len(p) > 1:
        new = np.empty(len(p), dtype=bool)
        new[0] = True
        new[1:] = np.max(np.abs(np.diff(p, axis=0)), axis=1) > tol
    else:
        new = np.ones(len(p), dtype=bool)
    group = np.cumsum(new) - 1
    atoms = p[new]
    merged = np.zeros(len(atoms))
    np.add.at(merged, group, w)
    inverse = np.empty(len(p), dtype=int)
    inverse[order] = group
    return atoms, merged, inverse


@dataclass(frozen=True)
class DiscreteMeasure:
    """Weighted atoms; duplicates are merged and atoms sorted on construction."""

    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        atoms = _as_points(self.atoms)
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if len(atoms) == 0:
            raise MeasureError("empty measure")
        if len(w) != len(atoms):
            raise MeasureError("one weight per atom required")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise MeasureError("weights must be finite and non-negative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise MeasureError(f"weights sum to {w.sum()!r}, not 1")
        keep = w > 0
        atoms, w, _ = _merge(atoms[keep], w[keep])
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", w)

    @property
    def dim(self):
        return self.atoms.shape[1]

    def __len__(self):
        return len(self.weights)

    @classmethod
    def dirac(cls, x):
        return cls(np.atleast_2d(np.asarray(x, dtype=float)).reshape(1, -1), [1.0])

    @classmethod
    def empirical(cls, points):
        points = _as_points(points)
        return cls(points, np.full(len(points), 1.0 / len(points)))

    def mean(self, fun=None):
        vals = self.atoms if fun is None else fun(self.atoms)
        return np.tensordot(self.weights, vals, axes=1)

    def realize(self, max_particles=10_000, shuffle=None, min_particles=1):
        """Ensemble whose empirical law is this measure.

        Weights are rationalised with a common denominator ``n <= max_particles``
        (continued-fraction approximation), then scaled up to the smallest
        multiple that is at least ``min_particles``. ``shuffle`` (a Generator)
        permutes particle order.
        """
        n = rational_size(self.weights, max_particles)
        n *= max(1, -(-min_particles // n))
        counts = np.rint(self.weights * n).astype(int)
        index = np.repeat(np.arange(len(self)), counts)
        if shuffle is not None:
            index = shuffle.permutation(index)
        return Ensemble(self.atoms[index], index, self)


def rational_size(weights, max_n=10_000, tol=1e-12):
    """Smallest common denominator <= max_n representing all weights."""
    n = 1
    for w in weights:
        q = Fraction(float(w)).limit_denominator(max_n).denominator
        n = n * q // np.gcd(n, q)
        if n > max_n:
            break
    counts = np.rint(np.asarray(weights) * n)
    if n > max_n or np.max(np.abs(counts / n - weights)) > tol or np.any(counts == 0):
        exact = [Fraction(float(w)).limit_denominator(10**9).denominator for w in weights]
        need = int(np.lcm.reduce(exact)) if len(exact) else 1
        raise MeasureError(
            f"weights are not representable with <= {max_n} equal-weight particles; "
            f"try max_particles={need}"
        )
    return int(n)


@dataclass
class Ensemble:
    """n equally weighted particles plus the map particle -> atom of ``law``."""

    particles: np.ndarray
    atom_index: np.ndarray = None
    law: DiscreteMeasure = field(default=None, repr=False)

    def __post_init__(self):
        self.particles = _as_points(self.particles)
        if self.atom_index is None or self.law is None:
            self.law = DiscreteMeasure.empirical(self.particles)
            _, _, inv = _merge(self.particles, np.full(self.n, 1.0 / self.n))
            self.atom_index = inv
        self.atom_index = np.asarray(self.atom_index, dtype=int)
        if len(self.atom_index) != self.n:
            raise MeasureError("atom_index must have one entry per particle")

    @property
    def n(self):
        return len(self.particles)

    @property
    def dim(self):
        return self.particles.shape[1]

    def atom_events(self):
        """Index sets {X = x_k}, one per atom."""
        return [np.flatnonzero(self.atom_index == k) for k in range(len(self.law))]

    def permuted(self, perm):
        perm = np.asarray(perm)
        return Ensemble(self.particles[perm], self.atom_index[perm], self.law)


def cdf_1d(mu, t):
    """F_mu(t) = mu((-inf, t]); vectorised over t."""
    if mu.dim != 1:
        raise MeasureError("cdf_1d needs a 1-D measure")
    cum = np.concatenate([[0.0], np.cumsum(mu.weights)])
    k = np.searchsorted(mu.atoms[:, 0], np.asarray(t, dtype=float), side="right")
    return np.minimum(cum[k], 1.0)


def _quantile_steps(mu):
    q = np.concatenate([[0.0], np.cumsum(mu.weights)])
    q[-1] = 1.0  # the cumulative sum may overshoot by an ulp
    return q


def wasserstein2_1d(mu, nu):
    """Exact W2 between 1-D discrete measures via the quantile coupling."""
    if mu.dim != 1 or nu.dim != 1:
        raise MeasureError("wasserstein2_1d needs 1-D measures")
    qa, qb = _quantile_steps(mu), _quantile_steps(nu)
    grid = np.union1d(qa, qb)
    mids = 0.5 * (grid[:-1] + grid[1:])
    widths = np.diff(grid)
    ia = np.minimum(np.searchsorted(qa, mids, side="right") - 1, len(mu) - 1)
    ib = np.minimum(np.searchsorted(qb, mids, side="right") - 1, len(nu) - 1)
    diff = mu.atoms[ia, 0] - nu.atoms[ib, 0]
    return float(np.sqrt(max(np.sum(widths * diff**2), 0.0)))


def wasserstein2_assign(X, Y):
    """Exact W2 between two equal-size equal-weight ensembles (optimal assignment)."""
    x = X.particles if isinstance(X, Ensemble) else _as_points(X)
    y = Y.particles if isinstance(Y, Ensemble) else _as_points(Y)
    if len(x) != len(y):
        raise MeasureError("ensembles must have the same number of particles")
    if len(x) > MAX_ASSIGN:
        raise MeasureError(f"assignment limited to n <= {MAX_ASSIGN}")
    if x.shape[1] != y.shape[1]:
        raise MeasureError("dimension mismatch")
    cost = np.sum((x[:, None, :] - y[None, :, :]) ** 2, axis=-1)
    r, c = linear_sum_assignment(cost)
    return float(np.sqrt(cost[r, c].sum() / len(x)))
