"""Analytic measure functionals with closed-form L-derivatives.

Every functional here exposes ``eval(measure) -> U-vector`` and, where known,
``rn(measure, y) -> (d_U, d)`` matrix, the Radon-Nikodym density of its
derivative measure (the L-derivative at ``y``). These are the oracles the
finite-difference engine in :mod:`mfspde.lions` is checked against, and the
drift fixtures for the particle simulator.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, roots_legendre

from .hilbert import BilinearSample
from .measures import DiscreteMeasure, cdf_1d

SQRT2PI = math.sqrt(2.0 * math.pi)


def _as_measure(mu):
    return mu if isinstance(mu, DiscreteMeasure) else DiscreteMeasure.empirical(mu)


# --------------------------------------------------------------------------
# scalar fixtures: (value, first, second derivative)


@dataclass(frozen=True)
class Scalar:
    name: str
    f: callable
    df: callable
    d2f: callable


def _gauss_bump():
    e = lambda z: np.exp(-0.5 * np.square(z))
    return Scalar("bump", e, lambda z: -z * e(z), lambda z: (np.square(z) - 1.0) * e(z))


SCALARS = {
    "tanh": Scalar(
        "tanh",
        np.tanh,
        lambda z: 1.0 / np.cosh(z) ** 2,
        lambda z: -2.0 * np.tanh(z) / np.cosh(z) ** 2,
    ),
    "bump": _gauss_bump(),
    "linear": Scalar("linear", lambda z: np.asarray(z, float), lambda z: np.ones_like(z, float),
                     lambda z: np.zeros_like(z, float)),
    "const": Scalar("const", lambda z: np.full_like(np.asarray(z, float), 0.5),
                    lambda z: np.zeros_like(z, float), lambda z: np.zeros_like(z, float)),
    "sin": Scalar("sin", np.sin, np.cos, lambda z: -np.sin(z)),
    "cos": Scalar("cos", np.cos, lambda z: -np.sin(z), lambda z: -np.cos(z)),
}


# --------------------------------------------------------------------------
# f(mu) = int h dmu


@dataclass
class LinearFunctional:
    """f(mu) = int h(x) mu(dx) for a coordinate-wise map h; d_U = d."""

    h: Scalar
    name: str = ""

    def eval(self, mu):
        mu = _as_measure(mu)
        return mu.mean(self.h.f)

    def jacobian(self, x):
        return np.diag(self.h.df(np.asarray(x, dtype=float)))

    def rn(self, mu, y):
        return self.jacobian(y)

    def rn_batch(self, y):
        return self.h.df(np.asarray(y, dtype=float))


def linear_identity():
    return LinearFunctional(SCALARS["linear"], "linear:id")


def linear_square():
    sq = Scalar("square", np.square, lambda z: 2.0 * np.asarray(z, float), lambda z: np.full_like(z, 2.0, float))
    return LinearFunctional(sq, "linear:square")


def linear_sin():
    return LinearFunctional(SCALARS["sin"], "linear:sin")


def linear_eval(fixture, mu):
    return fixture.eval(mu)


def linear_rn(fixture, y):
    return fixture.jacobian(y)


# --------------------------------------------------------------------------
# H_{mu0}(mu) = (2 pi)^{-1/2} int e^{-t^2/2} (F_mu(t) - F_{mu0}(t))^2 dt, mu0 = U[0, 1]


def _uniform_cdf(t):
    return np.clip(t, 0.0, 1.0)


def _gauss_poly_integral(l, r, a, b):
    """int_l^r phi(t) (a - b t)^2 dt with phi the standard normal density."""
    phi = lambda t: np.exp(-0.5 * t * t) / SQRT2PI
    if l >= 0:
        p0 = ndtr(-l) - ndtr(-r)
    else:
        p0 = ndtr(r) - ndtr(l)
    p1 = phi(l) - phi(r)
    p2 = p0 + l * phi(l) - r * phi(r)
    return a * a * p0 - 2.0 * a * b * p1 + b * b * p2


@dataclass
class GaussCdfFunctional:
    """Squared Gaussian-weighted L2 distance between CDFs, reference U[0, 1].

    The integrand is piecewise (constant - linear)^2 times the Gaussian
    density between breakpoints, so the integral is evaluated exactly piece
    by piece.
    """

    name: str = "gausscdf"

    def eval(self, mu):
        mu = _as_measure(mu)
        if mu.dim != 1:
            raise ValueError("gausscdf is defined on 1-D measures")
        y = mu.atoms[:, 0]
        cum = np.cumsum(mu.weights)
        bps = np.union1d(y, [0.0, 1.0])
        total = 0.0
        for l, r in zip(bps[:-1], bps[1:]):
            c = cum[np.searchsorted(y, l, side="right") - 1] if l >= y[0] else 0.0
            c = min(c, 1.0)
            if r <= 0.0:
                alpha, beta = 0.0, 0.0
            elif l >= 1.0:
                alpha, beta = 1.0, 0.0
            else:
                alpha, beta = 0.0, 1.0
            total += _gauss_poly_integral(l, r, c - alpha, beta)
        return np.array([total])

    def deriv(self, mu, y):
        """L-derivative at y, written with the left limit F_mu(y-):

        -2 g(y) (F_mu(y-) - F_0(y)) - g(y) mu({y}),   g(y) = e^{-y^2/2} / sqrt(2 pi).

        With the right-continuous CDF this is -2 g (F_mu(y) - F_0(y)) + g mu({y}).
        """
        mu = _as_measure(mu)
        y = np.asarray(y, dtype=float)
        g = np.exp(-0.5 * y * y) / SQRT2PI
        atoms = mu.atoms[:, 0]
        cum = np.concatenate([[0.0], np.cumsum(mu.weights)])
        left = np.minimum(cum[np.searchsorted(atoms, y, side="left")], 1.0)
        k = np.clip(np.searchsorted(atoms, y), 0, len(atoms) - 1)
        mass = np.where(np.abs(atoms[k] - y) <= 1e-12, mu.weights[k], 0.0)
        return -2.0 * g * (left - _uniform_cdf(y)) - g * mass

    def rn(self, mu, y):
        return np.array([[float(self.deriv(mu, float(np.ravel(y)[0])))]])


def gausscdf_eval(mu):
    return float(GaussCdfFunctional().eval(mu)[0])


def gausscdf_deriv(mu, y):
    return GaussCdfFunctional().deriv(mu, y)


# --------------------------------------------------------------------------
# g(x, mu) * F_mu counterexample on a t-grid


def conv_antiderivative(a, c):
    """int_{-inf}^{a} sgn(s) / (sqrt|s| + c) 1_{|s| <= 1} ds.

    Equals -2 (1 - sqrt|a|) + 2 c ln((1 + c) / (sqrt|a| + c)) on |a| <= 1 and
    0 outside; c = 0 gives the limit -2 (1 - sqrt|a|).
    """
    a = np.asarray(a, dtype=float)
    r = np.sqrt(np.abs(a))
    inside = np.abs(a) <= 1.0
    if c > 0:
        val = -2.0 * (1.0 - r) + 2.0 * c * np.log((1.0 + c) / (r + c))
    else:
        val = -2.0 * (1.0 - r)
    return np.where(inside, val, 0.0)


def conv_kernel(s, c):
    """g(s) = sgn(s) / (sqrt|s| + c) on |s| <= 1."""
    s = np.asarray(s, dtype=float)
    with np.errstate(divide="ignore"):
        val = np.sign(s) / (np.sqrt(np.abs(s)) + c)
    return np.where(np.abs(s) <= 1.0, val, 0.0)


def l2_grid(lo=-2.0, hi=3.0, m=1001):
    t = np.linspace(lo, hi, m)
    w = np.full(m, t[1] - t[0])
    w[[0, -1]] *= 0.5
    return t, w


@dataclass
class ConvCounterexample:
    """f(mu)(t) = int g(t - w, mu) F_mu(w) dw with g(x, mu) = sgn(x)/(sqrt|x| + H(mu)^2).

    Values live on a uniform t-grid; ``u_metric`` holds trapezoid weights so
    that sum(u_metric * v**2) is the L2(R) norm squared.
    """

    m: int = 1001
    lo: float = -2.0
    hi: float = 3.0
    frozen_c: float = None
    name: str = "convex"
    grid: np.ndarray = field(init=False, repr=False)
    u_metric: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.m < 64:
            warnings.warn(f"t-grid with {self.m} points is too coarse for L2 norms", RuntimeWarning)
        self.grid, self.u_metric = l2_grid(self.lo, self.hi, self.m)

    def shift(self, mu):
        if self.frozen_c is not None:
            return self.frozen_c
        return gausscdf_eval(mu) ** 2

    def eval(self, mu):
        mu = _as_measure(mu)
        c = self.shift(mu)
        x = mu.atoms[:, 0]
        out = np.zeros_like(self.grid)
        for xk, wk in zip(x, mu.weights):
            out += wk * conv_antiderivative(self.grid - xk, c)
        return out

    def kernel(self, s, mu=None):
        c = self.frozen_c if self.frozen_c is not None else self.shift(mu)
        return conv_kernel(s, c)


def frozen_convolution(c=0.5, m=1001):
    """Pure convolution g * F_mu with a fixed bounded kernel (H-term frozen)."""
    return ConvCounterexample(m=m, frozen_c=c, name=f"conv:c={c}")


def convex_eval(mu, m=1001):
    return ConvCounterexample(m=m).eval(mu)


# --------------------------------------------------------------------------
# int 1_{|t-x|<=1} 1_{|t-y|<=1} |t-x|^{-1/2} |t-y|^{-1/2} dt and its signed twin


def prodmaj_kernel(x, xt):
    """Closed form of int 1_{|t-x|<=1}1_{|t-x~|<=1} / (sqrt|t-x| sqrt|t-x~|) dt.

    |D| < 1: ln((2 sqrt(1-|D|) - (|D|-2)) / |2 sqrt(1-|D|) + (|D|-2)|) + pi
    1 < |D| <= 2: -2 arctan((|D|-2) / (2 sqrt(|D|-1)))
    |D| = 1 takes the two-sided limit pi; D = 0 diverges (returns inf).
    """
    D = np.abs(np.asarray(x, dtype=float) - np.asarray(xt, dtype=float))
    out = np.zeros_like(D)
    near = D < 1.0
    far = (D > 1.0) & (D <= 2.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.sqrt(np.clip(1.0 - D, 0.0, None))
        # numerator and denominator are (1 + a)^2 and (1 - a)^2; 1 - a = D / (1 + a)
        log_branch = 2.0 * np.log((1.0 + a) ** 2 / D) + np.pi
        b = np.sqrt(np.clip(D - 1.0, 1e-300, None))
        atan_branch = -2.0 * np.arctan((D - 2.0) / (2.0 * b))
    out = np.where(near, log_branch, out)
    out = np.where(far, atan_branch, out)
    out = np.where(D == 1.0, np.pi, out)
    return out[()] if out.ndim == 0 else out


def signed_kernel(x, xt):
    """int g0(t-x) g0(t-x~) dt with g0(s) = sgn(s) |s|^{-1/2} 1_{|s|<=1}.

    Differs from :func:`prodmaj_kernel` by the sign of the region between x
    and x~: |D| < 1 gives 2 ln((1+a)/(1-a)) - pi with a = sqrt(1-|D|), and
    1 < |D| <= 2 gives +2 arctan((|D|-2) / (2 sqrt(|D|-1))).
    """
    D = np.abs(np.asarray(x, dtype=float) - np.asarray(xt, dtype=float))
    u = prodmaj_kernel(x, xt)
    mid = np.where(D < 1.0, 2.0 * np.pi, np.where(D <= 2.0, 2.0 * np.where(D == 1.0, np.pi, u), 0.0))
    out = u - mid
    return out[()] if np.ndim(out) == 0 else out


def _graded_gl(fun, h, order=20, levels=40):
    # int_0^h fun(D) dD for fun with an integrable log singularity at 0
    x, w = roots_legendre(order)
    edges = np.concatenate([[0.0], h * 2.0 ** -np.arange(levels, -1, -1)])
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
        total += half * np.dot(w, fun(mid + half * x))
    return total


def block_integral(kernel, h, order=20):
    """int_{[0,h]^2} K(x - x~) dx dx~, split along the diagonal.

    Each triangle reduces to int_0^h (h - D) K(D) dD, integrated with
    Gauss-Legendre on panels graded towards the diagonal D = 0.
    """
    return 2.0 * _graded_gl(lambda D: (h - D) * kernel(D, 0.0), h, order)


def divergence_diagnostic(n_list=(1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024), kernel=signed_kernel):
    """S_n = sum over n interval blocks of sqrt(int int_{block^2} K) for X0 ~ U[0, 1].

    Blocks are translates of [0, 1/n] and K depends on x - x~ only, so all n
    block integrals coincide. Rows: (n, S_n, sqrt(ln n), S_n >= sqrt(ln n) (1 - 1e-3)).
    """
    rows = []
    for n in n_list:
        if n < 1 or (n & (n - 1)):
            raise ValueError(f"block counts must be powers of two, got {n}")
        if n > 1024:
            raise ValueError("block counts above 1024 are not supported")
        I = block_integral(kernel, 1.0 / n)
        s_n = n * math.sqrt(max(I, 0.0))
        bound = math.sqrt(math.log(n))
        rows.append((n, s_n, bound, bool(s_n >= bound * (1.0 - 1e-3))))
    return rows


# --------------------------------------------------------------------------
# b(mu) = v phi(E_mu[psi(<x, w>)])


@dataclass
class MeanFieldDrift:
    """Drift b(mu) = v * phi(E_mu[psi(<x, w>)]); depends on mu only."""

    v: np.ndarray
    w: np.ndarray
    phi: Scalar = field(default_factory=lambda: SCALARS["tanh"])
    psi: Scalar = field(default_factory=lambda: SCALARS["bump"])
    name: str = "drift:tanh-bump"

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=float)
        self.w = np.asarray(self.w, dtype=float)

    @property
    def dim(self):
        return self.v.size

    def moment(self, x, weights=None):
        """E[psi(<x, w>)] over a particle batch (equal weights unless given)."""
        z = np.atleast_2d(x) @ self.w
        vals = self.psi.f(z)
        return float(np.mean(vals) if weights is None else np.dot(weights, vals))

    def from_moment(self, m):
        return self.v * self.phi.f(m)

    def eval(self, mu):
        mu = _as_measure(mu)
        return self.from_moment(self.moment(mu.atoms, mu.weights))

    def dmu(self, mu, y):
        """d_mu b(mu)(y) = phi'(m) v (psi'(<y, w>) w)^T as a (d, d) matrix."""
        mu = _as_measure(mu)
        m = self.moment(mu.atoms, mu.weights)
        return self.phi.df(m) * self.psi.df(float(np.dot(y, self.w))) * np.outer(self.v, self.w)

    def dydmu(self, mu, y):
        """d_y d_mu b(mu)(y): (h1, h2) -> phi'(m) psi''(<y, w>) <h1, w> <h2, w> v."""
        mu = _as_measure(mu)
        m = self.moment(mu.atoms, mu.weights)
        scale = self.phi.df(m) * self.psi.d2f(float(np.dot(y, self.w)))
        return BilinearSample.from_outer(scale * self.v, self.w, self.w)

    def rn(self, mu, y):
        return self.dmu(mu, y)

    def mean_dmu(self, x):
        """E~[d_mu b(mu_x)(x~)] over the ensemble x itself."""
        x = np.atleast_2d(x)
        z = x @ self.w
        scale = self.phi.df(float(np.mean(self.psi.f(z)))) * float(np.mean(self.psi.df(z)))
        return scale * np.outer(self.v, self.w)

    def mean_dydmu(self, x):
        x = np.atleast_2d(x)
        z = x @ self.w
        scale = self.phi.df(float(np.mean(self.psi.f(z)))) * float(np.mean(self.psi.d2f(z)))
        return BilinearSample.from_outer(scale * self.v, self.w, self.w)


def tanh_bump_drift(dim, v=None, w=None):
    """Default drift fixture: modes 1 and 2 carry the interaction."""
    i = np.arange(1, dim + 1, dtype=float)
    if v is None:
        v = 1.0 / i
    if w is None:
        w = np.zeros(dim)
        w[0] = 1.0
        if dim > 1:
            w[1] = 0.5
    return MeanFieldDrift(v, w)


def drift_eval(drift, mu):
    return drift.eval(mu)


def drift_dmu(drift, mu, y):
    return drift.dmu(mu, y)


def drift_dydmu(drift, mu, y):
    return drift.dydmu(mu, y)


def lipschitz_estimate(drift, pairs):
    """max ||b(mu) - b(nu)|| / W2(mu, nu) over sampled ensemble pairs."""
    from .measures import wasserstein2_assign

    best = 0.0
    for x, y in pairs:
        w2 = wasserstein2_assign(x, y)
        if w2 > 0:
            diff = np.linalg.norm(drift.eval(DiscreteMeasure.empirical(x)) - drift.eval(DiscreteMeasure.empirical(y)))
            best = max(best, diff / w2)
    return best


FIXTURES = {
    "linear:id": linear_identity,
    "linear:square": linear_square,
    "linear:sin": linear_sin,
    "gausscdf": GaussCdfFunctional,
    "convex": ConvCounterexample,
    "drift:tanh-bump": tanh_bump_drift,
}


def fixture(name, dim=1, **kw):
    try:
        make = FIXTURES[name]
    except KeyError:
        raise KeyError(f"unknown fixture {name!r}; choose from {sorted(FIXTURES)}") from None
    if name.startswith("drift:"):
        return make(dim, **kw)
    return make(**kw)
