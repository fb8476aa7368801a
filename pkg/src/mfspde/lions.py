"""Finite-difference L-differentiation of measure functionals.

A functional ``f`` maps a :class:`~mfspde.measures.DiscreteMeasure` to a
vector in U (``f.eval``). Its lift evaluates f at the empirical law of an
ensemble. The derivative of the lift at X is represented by the vector
measure m(A)u = Df^(X)(u 1_A) on the finite probability space of particle
indices, estimated block by block with central differences.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .measures import DiscreteMeasure, Ensemble, MeasureError

POWER_MAXITER = 500
POWER_TOL = 1e-10


class FDError(ArithmeticError):
    pass


class ConvergenceError(ArithmeticError):
    pass


@dataclass(frozen=True)
class FDParams:
    eps0: float = 1e-4
    scheme: str = "central"
    relative: bool = True

    def __post_init__(self):
        if not self.eps0 > 0:
            raise ValueError("eps0 must be positive")
        if self.scheme != "central":
            raise ValueError("only central differences are implemented")


@dataclass
class VectorMeasureTable:
    """Block operators u -> m(A_i) u (d_U x d matrices) and P(A_i)."""

    partition: list
    blocks: list
    probs: np.ndarray
    n: int = 0

    def __post_init__(self):
        seen = np.concatenate([np.asarray(a, dtype=int) for a in self.partition]) if self.partition else np.array([], int)
        if len(np.unique(seen)) != len(seen):
            raise ValueError("partition subsets overlap")
        if self.n and len(seen) != self.n:
            raise ValueError("partition does not cover every particle")

    def norms(self, metric=None):
        return np.array([op_norm(M, metric) for M in self.blocks])


def _threads():
    try:
        return max(1, int(os.environ.get("MFSPDE_THREADS", "1")))
    except ValueError:
        return 1


def _map(fun, items, workers=None):
    """Ordered map, optionally over a thread pool; results keep input order."""
    workers = _threads() if workers is None else workers
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fun(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fun, items))


def _particles(X):
    return X.particles if isinstance(X, Ensemble) else np.atleast_2d(np.asarray(X, dtype=float))


def lift_eval(f, X):
    """f evaluated at the empirical law of X."""
    x = _particles(X)
    dims = getattr(f, "domain_dim", None)
    if dims is not None and x.shape[1] != dims:
        raise MeasureError(f"functional expects {dims}-dimensional particles, got {x.shape[1]}")
    out = np.atleast_1d(np.asarray(f.eval(DiscreteMeasure.empirical(x)), dtype=float))
    return out


def fd_step(X, Y, p=FDParams()):
    x = _particles(X)
    y = np.asarray(Y, dtype=float).reshape(x.shape)
    if not p.relative:
        return p.eps0
    rms_x = np.sqrt(np.mean(np.sum(x**2, axis=1)))
    rms_y = np.sqrt(np.mean(np.sum(y**2, axis=1)))
    return p.eps0 * max(1.0, rms_x) / max(1.0, rms_y)


def directional_derivative(f, X, Y, p=FDParams()):
    """(f^(X + eps Y) - f^(X - eps Y)) / (2 eps), eps from :func:`fd_step`."""
    x = _particles(X)
    y = np.asarray(Y, dtype=float)
    if y.ndim == 1 and x.shape[1] == 1:
        y = y[:, None]
    if y.shape != x.shape:
        raise ValueError(f"direction shape {y.shape} does not match ensemble {x.shape}")
    if not np.any(y):
        return np.zeros_like(lift_eval(f, x))
    eps = fd_step(x, y, p)
    if eps == 0 or not np.any((x + eps * y) != x):
        raise FDError("finite-difference step underflows")
    fp = lift_eval(f, x + eps * y)
    fm = lift_eval(f, x - eps * y)
    if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
        raise FDError("lift returned non-finite values")
    return (fp - fm) / (2.0 * eps)


def block_operator(f, X, A, p=FDParams(), directions=None):
    """d_U x d matrix of u -> m(A) u; column j is the derivative along e_j 1_A."""
    x = _particles(X)
    n, d = x.shape
    basis = np.eye(d) if directions is None else np.asarray(directions, dtype=float)
    A = np.asarray(A, dtype=int)
    cols = []
    for e in basis:
        if A.size == 0:
            cols.append(None)
            continue
        Y = np.zeros_like(x)
        Y[A] = e
        cols.append(directional_derivative(f, x, Y, p))
    if A.size == 0:
        du = lift_eval(f, x).size
        return np.zeros((du, len(basis)))
    return np.column_stack(cols)


def vector_measure(f, X, partition, directions=None, p=FDParams(), workers=None):
    x = _particles(X)
    parts = [np.asarray(a, dtype=int) for a in partition]
    blocks = _map(lambda A: block_operator(f, x, A, p, directions), parts, workers)
    probs = np.array([len(a) / len(x) for a in parts])
    return VectorMeasureTable(parts, blocks, probs, n=0)


def op_norm(M, metric=None):
    """Largest singular value via power iteration on M^T M.

    ``metric`` holds positive weights of the U inner product (trapezoid
    weights for grid-valued functionals). The Rayleigh quotient never
    overestimates, so the result is a lower bound even when stopped early.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if not np.all(np.isfinite(M)):
        raise FDError("non-finite block operator")
    if metric is not None:
        M = np.sqrt(np.asarray(metric, dtype=float))[:, None] * M
    if M.shape[0] == 1 or M.shape[1] == 1:
        return float(np.linalg.norm(M))
    if not np.any(M):
        return 0.0
    G = M.T @ M
    v = G[np.argmax(np.sum(G**2, axis=1))].copy()
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(POWER_MAXITER):
        w = G @ v
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0
        new = float(np.sqrt(max(v @ w, 0.0)))
        v = w / nw
        if abs(new - sigma) <= POWER_TOL * max(new, 1e-300):
            return new
        sigma = new
    raise ConvergenceError(f"power iteration did not converge in {POWER_MAXITER} iterations")


def _ensemble(X):
    return X if isinstance(X, Ensemble) else Ensemble(np.asarray(X, dtype=float))


@dataclass
class DisintegrationReport:
    residual: float
    direct: np.ndarray
    recombined: np.ndarray
    cond_probs: np.ndarray = field(repr=False)


def disintegration_check(f, X, A, p=FDParams(), metric=None):
    """|| m(A) - sum_k P(A | X = x_k) m({X = x_k}) || (operator norm)."""
    E = _ensemble(X)
    A = np.unique(np.asarray(A, dtype=int))
    events = E.atom_events()
    direct = block_operator(f, E.particles, A, p)
    cond = np.array([np.isin(ev, A).sum() / len(ev) for ev in events])
    total = np.zeros_like(direct)
    for c, ev in zip(cond, events):
        if c > 0:
            total += c * block_operator(f, E.particles, ev, p)
    return DisintegrationReport(op_norm(direct - total, metric), direct, total, cond)


def discrete_rn(f, mu, p=FDParams(), max_particles=10_000, shuffle=None, workers=None):
    """Per-atom density m({X = x_k}) / p_k, shape (N, d_U, d).

    An ensemble realising ``mu`` is built internally; ``shuffle`` permutes it.
    """
    E = mu.realize(max_particles=max_particles, shuffle=shuffle)
    events = E.atom_events()
    blocks = _map(lambda ev: block_operator(f, E.particles, ev, p), events, workers)
    return np.stack([M / w for M, w in zip(blocks, mu.weights)])


def factorization_check(f, X, Ys, p=FDParams(), metric=None):
    """max_Y || Df^(X) Y - mean_j g(X_j) Y_j ||_U with g from :func:`discrete_rn`."""
    E = _ensemble(X)
    g = discrete_rn(f, E.law, p, max_particles=max(E.n, 10_000))
    worst = 0.0
    for Y in Ys:
        Y = np.asarray(Y, dtype=float).reshape(E.particles.shape)
        lhs = directional_derivative(f, E, Y, p)
        rhs = np.einsum("jud,jd->u", g[E.atom_index], Y) / E.n
        diff = lhs - rhs
        nrm = np.sqrt(np.sum((metric if metric is not None else 1.0) * diff**2))
        worst = max(worst, float(nrm))
    return worst


def contiguous_blocks(X, nblocks):
    """Index blocks of equal size after a stable sort by the first coordinate.

    The remainder of n / nblocks goes to the last block.
    """
    x = _particles(X)
    n = len(x)
    if not 1 <= nblocks <= n:
        raise ValueError(f"need 1 <= blocks <= {n}, got {nblocks}")
    order = np.argsort(x[:, 0], kind="stable")
    size = n // nblocks
    cuts = [k * size for k in range(nblocks)] + [n]
    return [order[a:b] for a, b in zip(cuts[:-1], cuts[1:])]


@dataclass
class TwoVariationLevel:
    blocks: int
    lower_bound: float
    total_variation: float
    mass: float


def two_variation_estimate(f, X, levels, p=FDParams(), metric=None, workers=None):
    """Lower bounds of the 2-variation norm of Df^(X) over block refinements.

    Given a partition with block norms c_i = ||m(A_i)||, the supremum of
    sum_i ||m(A_i) x_i|| over step directions with E||Y||^2 <= 1 is attained
    by ||x_i|| proportional to c_i / P(A_i) (Lagrange), giving
    L = sqrt(sum_i c_i^2 / P(A_i)).
    """
    metric = getattr(f, "u_metric", None) if metric is None else metric
    x = _particles(X)
    out = []
    for nb in levels:
        parts = contiguous_blocks(x, nb)
        table = vector_measure(f, x, parts, p=p, workers=workers)
        c = table.norms(metric)
        L = float(np.sqrt(np.sum(c**2 / table.probs)))
        out.append(TwoVariationLevel(int(nb), L, float(np.sum(c)), float(np.sum(table.probs))))
    return out
