"""Residual checks of the Ito formulas for flows of measures and for mild
solutions of mean-field SPDEs.

Both checks compare the left-hand side f(..., L(u_t)) with the right-hand
side assembled from closed-form derivatives by left-point time quadrature.

Laws are Gaussian mixtures ``(1/n) sum_j N(c_j, diag(var))``. Empirical
measures are the special case var = 0. With the exact law (no Monte Carlo
in the measure argument) and, for the mild formula, conditional
expectations over the noise ("expected" mode), the residual is purely the
quadrature error and decays like the step size. The "pathwise" mode keeps
the noise and the coupled stochastic integral; its residual carries the
O(dt^{1/2}) fluctuation of the discrete quadratic variation.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .hilbert import DomainError, conv_variance
from .lions import _map
from .rng import child_seed, stream
from .sim import LawFlow, MfSpdeProblem, fit_slope, gauss_expect, initial_state
from .zoo import SCALARS, Scalar


@dataclass
class GaussMixture:
    centers: np.ndarray
    var: np.ndarray

    def expect(self, g, p):
        """E[g(<y, p>)] under the mixture."""
        c = self.centers @ p
        sd = math.sqrt(float(np.dot(p**2, self.var)))
        if sd == 0.0:
            return float(np.mean(g(c)))
        return float(np.mean(gauss_expect(g, c, sd)))


def empirical(points):
    points = np.atleast_2d(np.asarray(points, dtype=float))
    return GaussMixture(points, np.zeros(points.shape[1]))


# ---------------------------------------------------------------------------
# flow functionals f(t, mu), real valued


@dataclass
class LinearFlow:
    """f(mu) = E<y, v>."""

    v: np.ndarray

    def value(self, t, law):
        return float(np.mean(law.centers @ self.v))

    def dt(self, t, law):
        return 0.0

    def drift_term(self, t, law, b):
        return float(np.dot(self.v, b))

    def trace_term(self, t, law, a):
        return 0.0


@dataclass
class SquaredMeanFlow:
    """f(mu) = (E<y, v>)^2; d_mu f(y) = 2 E<y, v> v and d_y d_mu f = 0."""

    v: np.ndarray

    def value(self, t, law):
        return float(np.mean(law.centers @ self.v)) ** 2

    def dt(self, t, law):
        return 0.0

    def drift_term(self, t, law, b):
        return 2.0 * float(np.mean(law.centers @ self.v)) * float(np.dot(self.v, b))

    def trace_term(self, t, law, a):
        return 0.0


@dataclass
class BumpFlow:
    """f(t, mu) = e^{alpha t} (1 + E psi(<y, p>))."""

    p: np.ndarray
    alpha: float = 0.5
    psi: Scalar = field(default_factory=lambda: SCALARS["bump"])

    def value(self, t, law):
        return math.exp(self.alpha * t) * (1.0 + law.expect(self.psi.f, self.p))

    def dt(self, t, law):
        return self.alpha * self.value(t, law)

    def drift_term(self, t, law, b):
        return math.exp(self.alpha * t) * law.expect(self.psi.df, self.p) * float(np.dot(self.p, b))

    def trace_term(self, t, law, a):
        # tr(psi'' p p^T a) for diagonal a
        return math.exp(self.alpha * t) * law.expect(self.psi.d2f, self.p) * float(np.dot(self.p**2, a))


@dataclass
class ItoProcess:
    """du = b_t dt + sigma_t dW with b, sigma (diagonal) piecewise constant in time."""

    breaks: np.ndarray
    drifts: np.ndarray
    sigmas: np.ndarray
    Q: np.ndarray
    u0_mean: np.ndarray
    u0_scale: np.ndarray

    def __post_init__(self):
        self.breaks = np.asarray(self.breaks, dtype=float)
        self.drifts = np.atleast_2d(np.asarray(self.drifts, dtype=float))
        self.sigmas = np.atleast_2d(np.asarray(self.sigmas, dtype=float))
        if len(self.drifts) != len(self.breaks) - 1 or len(self.sigmas) != len(self.breaks) - 1:
            raise DomainError("one drift and one sigma per time piece required")

    @property
    def T(self):
        return float(self.breaks[-1])

    @property
    def dim(self):
        return self.drifts.shape[1]

    def piece(self, t):
        return int(np.clip(np.searchsorted(self.breaks, t, side="right") - 1, 0, len(self.drifts) - 1))

    def b(self, t):
        return self.drifts[self.piece(t)]

    def a(self, t):
        return self.sigmas[self.piece(t)] ** 2 * self.Q

    def _integral(self, vals, t):
        lo = self.breaks[:-1]
        hi = self.breaks[1:]
        lengths = np.clip(np.minimum(hi, t) - lo, 0.0, None)
        return lengths @ vals

    def shift(self, t):
        return self._integral(self.drifts, t)

    def var(self, t):
        return self._integral(self.sigmas**2 * self.Q, t)

    def initial(self, n, seed):
        return np.stack([self.u0_mean + self.u0_scale * stream(seed, j).standard_normal(self.dim) for j in range(n)])


def constant_process(dim, b=None, sigma=None, T=1.0, switch=None):
    """Fixture: b and sigma constant, or doubled after ``switch``."""
    i = np.arange(1, dim + 1, dtype=float)
    b = np.zeros(dim) if b is None else np.broadcast_to(np.asarray(b, float), (dim,))
    sigma = 1.0 / i if sigma is None else np.broadcast_to(np.asarray(sigma, float), (dim,))
    if switch is None:
        breaks, drifts, sigmas = [0.0, T], [b], [sigma]
    else:
        breaks, drifts, sigmas = [0.0, switch, T], [b, 2 * b], [sigma, 2 * sigma]
    return ItoProcess(breaks, drifts, sigmas, np.ones(dim), 1.0 / i**2, 0.5 / i**2)


@dataclass
class FlowReport:
    dt: float
    n: int
    lhs: float
    rhs: float
    time_term: float
    drift_term: float
    trace_term: float

    @property
    def residual(self):
        return abs(self.lhs - self.rhs)


def verify_flow_ito(process, f, dt, n, seed, law="exact"):
    """LHS f(T, mu_T) - f(0, mu_0) against the left-point quadrature of
    int [d_t f + E d_mu f(u) b + 1/2 E tr(d_y d_mu f(u) sigma Q sigma*)] dr.

    ``law="exact"``: mu_t is the Gaussian mixture started from the initial
    ensemble. ``law="empirical"``: particles follow Euler-Maruyama (exact for
    piecewise-constant coefficients aligned with the grid) and mu_t is their
    empirical law, which adds an O(n^{-1/2}) fluctuation.
    """
    T = process.T
    steps = int(round(T / dt))
    if abs(steps * dt - T) > 1e-12 * max(1.0, T):
        raise DomainError("T must be a whole number of steps")
    x0 = process.initial(n, seed)
    if law == "exact":
        laws = [GaussMixture(x0 + process.shift(k * dt), process.var(k * dt)) for k in range(steps + 1)]
    elif law == "empirical":
        rngs = [stream(seed, n + j) for j in range(n)]
        x = x0.copy()
        laws = [empirical(x)]
        for k in range(steps):
            t = k * dt
            xi = np.stack([r.standard_normal(process.dim) for r in rngs])
            x = x + process.b(t) * dt + np.sqrt(process.a(t) * dt) * xi
            laws.append(empirical(x))
    else:
        raise ValueError(f"unknown law mode {law!r}")
    tt = dr = tr = 0.0
    for k in range(steps):
        t = k * dt
        tt += dt * f.dt(t, laws[k])
        dr += dt * f.drift_term(t, laws[k], process.b(t))
        tr += 0.5 * dt * f.trace_term(t, laws[k], process.a(t))
    lhs = f.value(T, laws[-1]) - f.value(0.0, laws[0])
    return FlowReport(dt, n, lhs, tt + dr + tr, tt, dr, tr)


# ---------------------------------------------------------------------------
# mild formula


@dataclass
class MildTestFunctional:
    """f(t, x, mu) = e^{alpha t} phi(<x, e_k>) (1 + E_mu psi(<y, e_k>))."""

    alpha: float = 0.5
    phi: Scalar = field(default_factory=lambda: SCALARS["cos"])
    psi: Scalar = field(default_factory=lambda: SCALARS["bump"])
    mode: int = 0

    __test__ = False

    def _m(self, mu, g):
        pts = np.atleast_2d(mu)
        return float(np.mean(g(pts[:, self.mode])))

    def value(self, t, x, mu):
        return math.exp(self.alpha * t) * self.phi.f(x[self.mode]) * (1.0 + self._m(mu, self.psi.f))

    def dt(self, t, x, mu):
        return self.alpha * self.value(t, x, mu)

    def dx(self, t, x, mu):
        g = np.zeros(len(x))
        g[self.mode] = math.exp(self.alpha * t) * self.phi.df(x[self.mode]) * (1.0 + self._m(mu, self.psi.f))
        return g

    def dxx(self, t, x, mu):
        Hm = np.zeros((len(x), len(x)))
        Hm[self.mode, self.mode] = math.exp(self.alpha * t) * self.phi.d2f(x[self.mode]) * (1.0 + self._m(mu, self.psi.f))
        return Hm

    def dmu(self, t, x, mu, y):
        g = np.zeros(len(y))
        g[self.mode] = math.exp(self.alpha * t) * self.phi.f(x[self.mode]) * self.psi.df(y[self.mode])
        return g

    def dydmu(self, t, x, mu, y):
        Hm = np.zeros((len(y), len(y)))
        Hm[self.mode, self.mode] = math.exp(self.alpha * t) * self.phi.f(x[self.mode]) * self.psi.d2f(y[self.mode])
        return Hm


@dataclass
class MildReport:
    dt: float
    n: int
    residuals: np.ndarray
    terms: dict = field(repr=False)

    @property
    def mean_residual(self):
        return float(np.mean(np.abs(self.residuals)))

    @property
    def se_residual(self):
        return float(np.std(np.abs(self.residuals), ddof=1) / math.sqrt(len(self.residuals)))


def _expect_1d(g, mean, sd):
    if np.all(np.asarray(sd) == 0):
        return g(np.asarray(mean))
    return gauss_expect(g, mean, sd)


def verify_mild_ito(problem, f, dt, n, seed, T=None, mode="expected", flow=None, ref_h=None):
    """Residual of the mild Ito formula per particle, at time T.

    The law mu_s is the exact mixture (see :class:`~mfspde.sim.LawFlow`);
    particles are u_j(s) = e^{sA} u0_j + D(s) + Z_j(s) with Z the stochastic
    convolution on the grid. The x-argument of every term, including the
    trace term in d_y d_mu f, is e^{(T-s)A} u_s.

    ``mode="pathwise"``: Z sampled, stochastic integral accumulated with the
    same increments. ``mode="expected"``: every term replaced by its
    conditional expectation given u0_j (the stochastic integral drops out).
    """
    if not isinstance(problem, MfSpdeProblem):
        raise TypeError("problem must be an MfSpdeProblem")
    T = problem.T if T is None else T
    steps = int(round(T / dt))
    if abs(steps * dt - T) > 1e-12 * max(1.0, T):
        raise DomainError("T must be a whole number of steps")
    state = initial_state(problem, n, seed)
    x0 = state.particles
    if flow is None:
        h = dt / 8 if ref_h is None else ref_h
        flow = LawFlow(problem, x0, h, T)
    k_ = f.mode
    lam = problem.lam
    l1 = lam[k_]
    BQ1 = problem.B[k_] ** 2 * problem.Q[k_]
    a = f.alpha
    phi, psi = f.phi, f.psi

    def law_stats(s):
        # projection of L(e^{(T-s)A} u_s) on e_k: centers and common sd
        D = flow.at(s)
        var = flow.variance(s)[k_]
        decay = math.exp(-l1 * (T - s))
        centers = math.exp(-l1 * T) * x0[:, k_] + decay * D[k_]
        return centers, decay * math.sqrt(var), D

    def law_mean(g, s):
        c, sd, _ = law_stats(s)
        return float(np.mean(_expect_1d(g, c, sd)))

    names = ("R1", "R2", "R3", "R4", "R5", "R6", "R7", "LHS")
    acc = {k: np.zeros(n) for k in names}
    var_step = conv_variance(problem.spectrum, problem.B, problem.Q, dt)[k_]
    Z = np.zeros(n)
    rng_noise = [stream(child_seed(seed, 0x17C), j) for j in range(n)] if mode == "pathwise" else None
    if mode not in ("pathwise", "expected"):
        raise ValueError(f"unknown mode {mode!r}")

    # R1: f(t0, e^{TA} u0, L(e^{TA} u0))
    x_T0 = math.exp(-l1 * T) * x0[:, k_]
    acc["R1"] = phi.f(x_T0) * (1.0 + float(np.mean(psi.f(x_T0))))

    for k in range(steps):
        s = k * dt
        centers, sd_law, D = law_stats(s)
        decay = math.exp(-l1 * (T - s))
        M0 = float(np.mean(_expect_1d(psi.f, centers, sd_law)))
        M1 = float(np.mean(_expect_1d(psi.df, centers, sd_law)))
        M2 = float(np.mean(_expect_1d(psi.d2f, centers, sd_law)))
        b = flow.law_drift(s, D)
        eb = decay * b[k_]
        c = decay**2 * BQ1
        w = math.exp(a * s)
        # x = e^{(T-s)A} u_s projected on e_k
        xc = centers  # conditional mean given u0_j
        if mode == "pathwise":
            x = xc + decay * Z
            P0, P1, P2 = phi.f(x), phi.df(x), phi.d2f(x)
        else:
            sd = decay * math.sqrt(flow.variance(s)[k_]) if s > 0 else 0.0
            P0 = _expect_1d(phi.f, xc, sd)
            P1 = _expect_1d(phi.df, xc, sd)
            P2 = _expect_1d(phi.d2f, xc, sd)
        acc["R2"] += dt * a * w * P0 * (1.0 + M0)
        acc["R3"] += dt * w * P0 * M1 * eb
        acc["R4"] += dt * 0.5 * w * P0 * M2 * c
        acc["R5"] += dt * w * P1 * (1.0 + M0) * eb
        acc["R7"] += dt * 0.5 * w * P2 * (1.0 + M0) * c
        if mode == "pathwise":
            xi = math.sqrt(var_step) * np.array([r.standard_normal() for r in rng_noise])
            # int_{s_k}^{s_k+1} e^{(T-r)A} B dW_r = e^{(T - s_{k+1})A} xi_k
            acc["R6"] += w * P1 * (1.0 + M0) * math.exp(-l1 * (T - s - dt)) * xi
            Z = math.exp(-l1 * dt) * Z + xi

    centers, sd_law, D = law_stats(T)
    MT = float(np.mean(_expect_1d(psi.f, centers, sd_law)))
    if mode == "pathwise":
        acc["LHS"] = math.exp(a * T) * phi.f(centers + Z) * (1.0 + MT)
    else:
        sd = math.sqrt(flow.variance(T)[k_])
        acc["LHS"] = math.exp(a * T) * _expect_1d(phi.f, centers, sd) * (1.0 + MT)
    rhs = sum(acc[k] for k in names[:-1])
    return MildReport(dt, n, acc["LHS"] - rhs, acc)


@dataclass
class ResidualTable:
    rows: list
    fitted_rate: float

    def monotone(self, k_se=2.0):
        """Residuals non-increasing as dt halves, within k_se standard errors."""
        ok = True
        for (dt_a, _, m_a, s_a), (dt_b, _, m_b, s_b) in zip(self.rows, self.rows[1:]):
            ok &= m_b <= m_a + k_se * math.hypot(s_a, s_b)
        return bool(ok)


def residual_table(run, dts, reps=1, workers=None):
    """Rows (dt, n, mean_residual, sd_residual) for dt descending; ``run(dt, rep)``
    returns an array of absolute residuals. sd is the standard error of the mean."""
    dts = sorted(dts, reverse=True)
    rows = []
    for dt in dts:
        vals = np.concatenate([np.atleast_1d(v) for v in _map(lambda r: run(dt, r), range(reps), workers)])
        se = float(np.std(vals, ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
        rows.append((dt, None, float(np.mean(vals)), se))
    rate = fit_slope([r[0] for r in rows], [r[2] for r in rows])
    return ResidualTable(rows, rate)


def flow_residual_table(process, f, dts, n, seed, reps=4, law="exact", workers=None):
    def run(dt, r):
        return verify_flow_ito(process, f, dt, n, child_seed(seed, r), law).residual

    tab = residual_table(run, dts, reps, workers)
    tab.rows = [(dt, n, m, s) for dt, _, m, s in tab.rows]
    return tab


def mild_residual_table(problem, f, dts, n, seed, T=None, mode="expected", workers=None):
    """One shared initial ensemble and law flow for all dt (reference step dt_min / 8)."""
    T = problem.T if T is None else T
    x0 = initial_state(problem, n, seed).particles
    flow = LawFlow(problem, x0, min(dts) / 8, T)

    def run(dt, r):
        return np.abs(verify_mild_ito(problem, f, dt, n, seed, T, mode, flow=flow).residuals)

    tab = residual_table(run, dts, 1, workers)
    tab.rows = [(dt, n, m, s) for dt, _, m, s in tab.rows]
    return tab
