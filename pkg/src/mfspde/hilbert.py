"""Truncated spectral model of the state space H.

H is represented by its first ``d`` eigenmodes of the operator A, which acts
as multiplication by ``-lambda_i`` on mode ``i``. Vectors are plain numpy
arrays of coefficients (shape ``(d,)`` or a batch ``(n, d)``); diagonal
operators (B, Q) are arrays of their diagonal entries.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import roots_legendre

# lambda * dt below this uses the small-lambda limit of the convolution variance
SMALL_LAMBDA_DT = 1e-12
# tail fits within this of the summability edge i^-1 do not count as decaying
TAIL_MARGIN = 0.05


class DomainError(ValueError):
    pass


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class Spectrum:
    """Eigenvalues ``lambda_i >= 0`` of ``-A`` and the shift ``kappa``."""

    eigenvalues: np.ndarray
    kappa: float = 0.0

    def __post_init__(self):
        lam = np.asarray(self.eigenvalues, dtype=float).reshape(-1)
        if lam.size == 0:
            raise DomainError("spectrum needs at least one mode")
        if not np.all(np.isfinite(lam)) or np.any(lam < 0):
            raise DomainError("eigenvalues must be finite and non-negative")
        if self.kappa < 0:
            raise DomainError("kappa must be non-negative")
        if np.any(self.kappa + lam <= 0):
            raise DomainError("kappa + lambda_i must be positive for every mode")
        lam.setflags(write=False)
        object.__setattr__(self, "eigenvalues", lam)
        object.__setattr__(self, "kappa", float(self.kappa))

    @property
    def dim(self):
        return self.eigenvalues.size

    @classmethod
    def dirichlet(cls, dim, kappa=0.0):
        """Dirichlet Laplacian on (0, 1): lambda_i = i^2 pi^2."""
        i = np.arange(1, dim + 1, dtype=float)
        return cls(i**2 * np.pi**2, kappa)


@dataclass(frozen=True)
class BilinearSample:
    """Bilinear map H x H -> U stored as ``tensor[k, l, :] = Phi(e_k, e_l)``."""

    tensor: np.ndarray

    @classmethod
    def from_outer(cls, u, x, y):
        """Phi(a, b) = <a, x> <b, y> u."""
        return cls(np.einsum("k,l,m->klm", np.asarray(x), np.asarray(y), np.atleast_1d(u)))

    def __call__(self, a, b):
        return np.einsum("k,l,klm->m", a, b, self.tensor)


def _check_vector(s, v):
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != s.dim:
        raise ShapeError(f"vector has {v.shape[-1]} modes, spectrum has {s.dim}")
    return v


def semigroup_factors(s, t):
    if t < 0:
        raise DomainError("semigroup is only defined for t >= 0")
    return np.exp(-s.eigenvalues * t)


def semigroup_apply(s, t, v):
    """e^{tA} v, mode by mode. Works on a single vector or a batch."""
    return semigroup_factors(s, t) * _check_vector(s, v)


def frac_power_apply(s, gamma, v):
    """(kappa - A)^gamma v."""
    if not 0.0 <= gamma <= 1.0:
        raise DomainError("gamma must lie in [0, 1]")
    return (s.kappa + s.eigenvalues) ** gamma * _check_vector(s, v)


def trace_pair(phi, S):
    """sum_k Phi(e_k, S e_k) for a bilinear sample and a (d, d) operator."""
    T = np.asarray(phi.tensor if isinstance(phi, BilinearSample) else phi, dtype=float)
    S = np.asarray(S, dtype=float)
    if S.ndim == 1:
        S = np.diag(S)
    if T.ndim != 3 or T.shape[0] != T.shape[1] or S.shape != T.shape[:2]:
        raise ShapeError(f"cannot pair tensor {T.shape} with operator {S.shape}")
    # Phi(e_k, S e_k) = sum_l S[l, k] T[k, l]
    return np.einsum("lk,klm->m", S, T)


def conv_variance(s, B, Q, dt):
    """Per-mode variance of int_0^dt e^{(dt-r)A} B dW_r (diagonal B, Q)."""
    if dt <= 0:
        raise DomainError("time step must be positive")
    B = _check_vector(s, B)
    Q = _check_vector(s, Q)
    if np.any(Q < 0):
        raise DomainError("Q must be non-negative")
    lam = s.eigenvalues
    x = 2.0 * lam * dt
    small = lam * dt < SMALL_LAMBDA_DT
    safe = np.where(small, 1.0, lam)
    # -expm1(-x)/(2 lam) is accurate for moderate x; the limit covers lam -> 0
    var = np.where(small, dt, -np.expm1(-x) / (2.0 * safe))
    return B**2 * Q * var


def stoch_conv_sample(s, B, Q, dt, rng, size=None):
    """Exact sample of the stochastic convolution over one step of length dt.

    ``size`` draws a batch of shape ``(size, d)`` from a single stream.
    """
    sd = np.sqrt(conv_variance(s, B, Q, dt))
    shape = (s.dim,) if size is None else (size, s.dim)
    return sd * rng.standard_normal(shape)


def hs_norm_sq_semigroup_B(s, B, t, gamma=0.0):
    """||(kappa - A)^gamma e^{tA} B||^2_{L2} for diagonal B."""
    lam = s.eigenvalues
    return np.sum((s.kappa + lam) ** (2 * gamma) * np.exp(-2 * lam * t) * np.asarray(B) ** 2)


def _gl_integral(fun, a, b, order=32, panels=64):
    # composite Gauss-Legendre on geometrically graded panels towards a
    x, w = roots_legendre(order)
    edges = a + (b - a) * np.concatenate([[0.0], np.geomspace(1e-12, 1.0, panels)])
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
        total += half * np.sum(w * np.array([fun(mid + half * xi) for xi in x]))
    return total


@dataclass
class RegularityReport:
    gamma: float
    delta: float
    gamma_integral: float
    gamma_integral_closed: float
    tail_slopes: dict
    delta_slopes: list


def r0_check(s, B, Q=None, T=1.0, gammas=None, t_grid=None):
    """Numerical stand-in for the (R0) regularity condition on a truncation.

    ``delta``: the small-t exponent of int_0^t ||e^{rA}B||^2 dr <= C t^{2 delta},
    read off as half the log-log slope between the two finest dyadic points
    and capped at 1/2. All slopes are returned for inspection.

    ``gamma``: on a finite truncation every integral is finite, so the check
    looks at how the per-mode contributions to
    int_0^T ||(kappa - A)^gamma e^{rA} B||^2 dr decay with the mode index.
    A power-law fit over the upper half of the modes must decay faster than
    i^-(1 + TAIL_MARGIN) for the series to stay summable as the truncation grows; the
    largest such gamma on the grid (step 0.05, strictly below 1) is declared.
    The integral at the declared gamma is evaluated both by quadrature and in
    closed form.
    """
    lam = s.eigenvalues
    B = np.asarray(B, dtype=float)
    Q = np.ones_like(B) if Q is None else np.asarray(Q, dtype=float)
    BQ = B**2 * Q
    if t_grid is None:
        t_grid = 2.0 ** -np.arange(4, 16)
    t_grid = np.sort(np.asarray(t_grid, dtype=float))
    cum = np.array([np.sum(conv_variance(s, np.sqrt(BQ), np.ones_like(B), t)) for t in t_grid])
    slopes = list(np.diff(np.log(cum)) / np.diff(np.log(t_grid)))
    delta = float(min(0.5, 0.5 * slopes[0]))

    if gammas is None:
        gammas = np.round(np.arange(0.05, 1.0, 0.05), 2)
    idx = np.arange(1, s.dim + 1)
    upper = idx > s.dim // 2
    if upper.sum() < 2:
        upper = idx >= 1
    tail = {}
    gamma = 0.0
    for g in gammas:
        terms = (s.kappa + lam) ** (2 * g) * conv_variance(s, np.sqrt(BQ), np.ones_like(B), T)
        ok = terms > 0
        sel = upper & ok
        if sel.sum() >= 2:
            p = np.polyfit(np.log(idx[sel]), np.log(terms[sel]), 1)[0]
        else:
            p = -np.inf
        tail[float(g)] = float(p)
        if p < -1.0 - TAIL_MARGIN:
            gamma = float(g)
    closed = float(np.sum((s.kappa + lam) ** (2 * gamma) * conv_variance(s, np.sqrt(BQ), np.ones_like(B), T)))
    quad_val = _gl_integral(lambda r: hs_norm_sq_semigroup_B(s, np.sqrt(BQ), r, gamma), 0.0, T)
    return RegularityReport(gamma, delta, float(quad_val), closed, tail, slopes)
