"""Interacting-particle simulation of du = [Au + b(L(u))] dt + B dW.

Two one-step maps are provided. ``exp_euler_step`` applies the semigroup to
state and frozen drift. ``taylor2_step`` adds the first-order measure
corrections of the stochastic Taylor expansion (drift-transport and trace
terms), with coefficients frozen at the start of the step.

Because b depends on the law only, the law of the particle system started
from a fixed ensemble u0 is a Gaussian mixture

    mu_t = (1/n) sum_j N(e^{tA} u0_j + D(t), Sigma(t)),

with deterministic mean shift D and the stochastic-convolution variance
Sigma. :class:`LawFlow` integrates D accurately; it is the reference for
the local-error study and the exact law for the Ito residual checks.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import gammainc, gammaln, roots_legendre

from .hilbert import DomainError, Spectrum, conv_variance, semigroup_factors, trace_pair
from .lions import _map
from .measures import DiscreteMeasure, wasserstein2_assign
from .rng import child_seed, check_seed, stream
from .zoo import MeanFieldDrift, tanh_bump_drift


class NumericalAbort(ArithmeticError):
    """Raised when a run produces non-finite values."""

    def __init__(self, msg, step=None):
        super().__init__(msg if step is None else f"{msg} at step {step}")
        self.step = step


GH_NODES, GH_WEIGHTS = hermegauss(64)
GH_WEIGHTS = GH_WEIGHTS / GH_WEIGHTS.sum()


def gauss_expect(fun, mean, sd):
    """E[fun(mean + sd Z)], Z ~ N(0, 1), by 64-point Gauss-Hermite; vectorised over mean."""
    mean = np.asarray(mean, dtype=float)
    vals = fun(mean[..., None] + np.asarray(sd)[..., None] * GH_NODES)
    return vals @ GH_WEIGHTS


@dataclass
class MfSpdeProblem:
    spectrum: Spectrum
    B: np.ndarray
    Q: np.ndarray
    drift: MeanFieldDrift
    u0_mean: np.ndarray
    u0_scale: np.ndarray
    T: float = 1.0
    gamma: float = None
    delta: float = None

    def __post_init__(self):
        d = self.spectrum.dim
        self.B = np.broadcast_to(np.asarray(self.B, dtype=float), (d,)).copy()
        self.Q = np.broadcast_to(np.asarray(self.Q, dtype=float), (d,)).copy()
        self.u0_mean = np.broadcast_to(np.asarray(self.u0_mean, dtype=float), (d,)).copy()
        self.u0_scale = np.broadcast_to(np.asarray(self.u0_scale, dtype=float), (d,)).copy()
        if np.any(self.Q < 0):
            raise DomainError("Q must be non-negative")
        if self.drift.dim != d:
            raise DomainError(f"drift has dimension {self.drift.dim}, spectrum {d}")

    @property
    def dim(self):
        return self.spectrum.dim

    @property
    def lam(self):
        return self.spectrum.eigenvalues

    def initial_particle(self, rng):
        return self.u0_mean + self.u0_scale * rng.standard_normal(self.dim)


def tanh_bump_problem(dim=16, T=1.0, kappa=0.0, noise_decay=1.0, u0_decay=2.0, u0_spread=0.5):
    """Dirichlet spectrum, B_i = i^-noise_decay, Q = 1, u0_i = i^-u0_decay (1 + spread xi)."""
    i = np.arange(1, dim + 1, dtype=float)
    mean = i**-u0_decay
    return MfSpdeProblem(
        Spectrum.dirichlet(dim, kappa),
        i**-noise_decay,
        np.ones(dim),
        tanh_bump_drift(dim),
        mean,
        u0_spread * mean,
        T,
    )


@dataclass
class EnsembleState:
    t: float
    particles: np.ndarray
    rngs: list = field(repr=False)

    @property
    def n(self):
        return len(self.particles)


def initial_state(problem, n, seed):
    """Particle j draws its initial value and all later noise from stream j."""
    check_seed(seed)
    rngs = [stream(seed, j) for j in range(n)]
    x = np.stack([problem.initial_particle(r) for r in rngs])
    return EnsembleState(0.0, x, rngs)


def _noise(problem, state, dt, workers=None):
    sd = np.sqrt(conv_variance(problem.spectrum, problem.B, problem.Q, dt))
    rows = _map(lambda r: r.standard_normal(problem.dim), state.rngs, workers)
    return sd * np.stack(rows)


def _check(x, step=None):
    if not np.all(np.isfinite(x)):
        raise NumericalAbort("non-finite particle values", step)
    return x


def euler_drift(problem, x, dt):
    """e^{dt A} b(mu) dt for the empirical law of x."""
    b = problem.drift.from_moment(problem.drift.moment(x))
    return semigroup_factors(problem.spectrum, dt) * b * dt


def exp_euler_step(problem, state, dt, workers=None):
    if dt <= 0:
        raise DomainError("time step must be positive")
    e = semigroup_factors(problem.spectrum, dt)
    shift = euler_drift(problem, state.particles, dt)
    z = _noise(problem, state, dt, workers)
    x = _check(e * state.particles + shift + z)
    return EnsembleState(state.t + dt, x, state.rngs)


# ---------------------------------------------------------------------------
# exponentially weighted quadrature


def _ilower(p, z):
    # int_0^1 e^{-z s} s^p ds
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    small = z < 1e-3
    zs = z[small]
    ser = np.zeros_like(zs)
    term = np.ones_like(zs)
    for k in range(12):
        ser += term / (p + k + 1)
        term = term * (-zs) / (k + 1)
    out[small] = ser
    zb = z[~small]
    out[~small] = np.exp(gammaln(p + 1) + np.log(gammainc(p + 1, zb)) - (p + 1) * np.log(zb))
    return out


def exp_weights(lam, dt, nodes):
    """W[k, i] = int_0^dt e^{-lam_i (dt - s)} l_k(s / dt) ds.

    ``l_k`` are the Lagrange polynomials on ``nodes`` (in [0, 1]); the
    monomial moments are exact incomplete-gamma expressions, so stiff modes
    (lam dt >> 1) are integrated without resolving the boundary layer.
    """
    nodes = np.asarray(nodes, dtype=float)
    m = len(nodes)
    z = np.asarray(lam, dtype=float) * dt
    # int_0^1 e^{-z (1 - x)} x^q dx = sum_p C(q, p) (-1)^p int_0^1 e^{-z s} s^p ds
    I = np.stack([_ilower(p, z) for p in range(m)])
    M = np.stack([sum(math.comb(q, p) * (-1) ** p * I[p] for p in range(q + 1)) for q in range(m)])
    V = nodes[None, :] ** np.arange(m)[:, None]
    return dt * np.linalg.solve(V, M)


def _gl01(m):
    x, w = roots_legendre(m)
    return 0.5 * (x + 1.0), 0.5 * w


def taylor2_drift(problem, x, dt, m=4):
    """Deterministic part of the second-order expansion over one step.

    Sum of the flow term int e^{(dt-s)A} b(L(e^{sA} u0)) ds, the transport
    correction with d_mu b, and the trace correction with d_y d_mu b. Inner
    integrands depend on tau = s - r only; outer integrals use exponential
    weights, inner ones Gauss-Legendre on [0, s].
    """
    drift = problem.drift
    if not hasattr(drift, "mean_dmu"):
        raise TypeError("drift provides no closed-form measure derivatives")
    lam = problem.lam
    nodes, wts = _gl01(m)
    W = exp_weights(lam, dt, nodes)
    b0 = drift.from_moment(drift.moment(x))
    BQ = problem.B**2 * problem.Q
    out = np.zeros(problem.dim)
    for k, sk in enumerate(dt * nodes):
        xs = x * np.exp(-lam * sk)
        flow = drift.from_moment(drift.moment(xs))
        inner = np.zeros(problem.dim)
        for tau_frac, wt in zip(nodes, wts):
            tau = sk * tau_frac
            e = np.exp(-lam * tau)
            xt = x * e
            first = drift.mean_dmu(xt) @ (e * b0)
            second = 0.5 * trace_pair(drift.mean_dydmu(xt), BQ * e * e)
            inner += sk * wt * (first + second)
        out += W[k] * (flow + inner)
    return out


def taylor2_step(problem, state, dt, quad_order=4, workers=None):
    if dt <= 0:
        raise DomainError("time step must be positive")
    e = semigroup_factors(problem.spectrum, dt)
    shift = taylor2_drift(problem, state.particles, dt, quad_order)
    z = _noise(problem, state, dt, workers)
    x = _check(e * state.particles + shift + z)
    return EnsembleState(state.t + dt, x, state.rngs)


SCHEMES = {"euler": exp_euler_step, "taylor2": taylor2_step}


def scheme_drift(problem, scheme, x, dt, quad_order=4):
    if scheme == "euler":
        return euler_drift(problem, x, dt)
    if scheme == "taylor2":
        return taylor2_drift(problem, x, dt, quad_order)
    raise KeyError(f"unknown scheme {scheme!r}")


# ---------------------------------------------------------------------------
# observables and trajectories

OBSERVABLES = ("t", "mean_mode1", "mean_mode2", "second_moment", "w2_initial")


def observables(state, x0):
    x = state.particles
    row = {"t": state.t, "mean_mode1": float(np.mean(x[:, 0]))}
    row["mean_mode2"] = float(np.mean(x[:, 1])) if x.shape[1] > 1 else 0.0
    row["second_moment"] = float(np.mean(np.sum(x**2, axis=1)))
    row["w2_initial"] = wasserstein2_assign(x, x0) if len(x) <= 512 else float("nan")
    return row


def simulate(problem, scheme, dt, n, seed, T=None, quad_order=4, workers=None, every=1):
    """Run ``scheme`` to time T; returns observable rows every ``every`` steps."""
    T = problem.T if T is None else T
    steps = int(round(T / dt))
    if steps < 1 or abs(steps * dt - T) > 1e-12 * max(1.0, T):
        raise DomainError(f"T = {T} is not a whole number of steps of {dt}")
    state = initial_state(problem, n, seed)
    x0 = state.particles.copy()
    rows = [observables(state, x0)]
    for k in range(1, steps + 1):
        if scheme == "euler":
            state = exp_euler_step(problem, state, dt, workers)
        elif scheme == "taylor2":
            state = taylor2_step(problem, state, dt, quad_order, workers)
        else:
            raise KeyError(f"unknown scheme {scheme!r}")
        if not np.all(np.isfinite(state.particles)):
            raise NumericalAbort("non-finite particle values", k)
        if k % every == 0 or k == steps:
            rows.append(observables(state, x0))
    return rows, state


# ---------------------------------------------------------------------------
# law-level flow


class LawFlow:
    """Mean shift D(t) of the exact law started from the ensemble ``x0``.

    D' = -lam D + b(mu_t) with mu_t the Gaussian mixture above; integrated
    by first-order exponential time differencing at steps h and 2h and
    Richardson-extrapolated. Values are available on the 2h grid.

    ``spread`` estimates the error of the extrapolated values: the same
    extrapolation from steps 2h and 4h is second-order too, so a third of
    their gap bounds the finer one asymptotically.
    """

    def __init__(self, problem, x0, h, t_end):
        self.problem = problem
        self.x0 = np.atleast_2d(np.asarray(x0, dtype=float))
        steps = int(round(t_end / h))
        if steps % 4 or abs(steps * h - t_end) > 1e-12:
            raise DomainError("t_end must be a multiple of 4 steps h")
        fine = self._etd(h, steps)
        mid = self._etd(2 * h, steps // 2)
        coarse = self._etd(4 * h, steps // 4)
        self.h = 2 * h
        self.times = 2 * h * np.arange(steps // 2 + 1)
        self.D = 2.0 * fine[::2] - mid
        rough = 2.0 * mid[::2] - coarse
        self.spread = float(np.max(np.abs(self.D[::2] - rough)) / 3.0)

    def variance(self, t):
        p = self.problem
        if t <= 0:
            return np.zeros(p.dim)
        return conv_variance(p.spectrum, p.B, p.Q, t)

    def moment(self, t, D):
        p = self.problem
        drift = p.drift
        mean = (self.x0 * np.exp(-p.lam * t) + D) @ drift.w
        sd = math.sqrt(float(np.dot(drift.w**2, self.variance(t))))
        return float(np.mean(gauss_expect(drift.psi.f, mean, sd)))

    def law_drift(self, t, D):
        return self.problem.drift.from_moment(self.moment(t, D))

    def _etd(self, h, steps):
        lam = self.problem.lam
        e = np.exp(-lam * h)
        z = lam * h
        phi1 = np.where(z < 1e-12, 1.0, -np.expm1(-z) / np.where(z == 0, 1.0, z))
        D = np.zeros((steps + 1, self.problem.dim))
        for k in range(steps):
            D[k + 1] = e * D[k] + phi1 * h * self.law_drift(k * h, D[k])
        return D

    def at(self, t):
        k = int(round(t / self.h))
        if abs(k * self.h - t) > 1e-12 * max(1.0, t) or not 0 <= k < len(self.times):
            raise DomainError(f"time {t} is not on the reference grid")
        return self.D[k]


def weak_observables(problem, x0, D, t):
    """Exact E[cos u_1] and E||u||^2 at time t for the mixture with shift D."""
    lam = problem.lam
    var = conv_variance(problem.spectrum, problem.B, problem.Q, t)
    mean = x0 * np.exp(-lam * t) + D
    cos1 = float(np.mean(np.cos(mean[:, 0])) * math.exp(-0.5 * var[0]))
    sq = float(np.mean(np.sum(mean**2, axis=1)) + np.sum(var))
    return np.array([cos1, sq])


def fit_slope(x, y):
    x, y = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    return float(np.polyfit(x, y, 1)[0])


@dataclass
class LocalErrorTable:
    dts: np.ndarray
    err_euler: np.ndarray
    err_taylor2: np.ndarray
    se_euler: np.ndarray
    se_taylor2: np.ndarray
    slope_euler: float
    slope_taylor2: float
    per_observable: dict
    reference_spread: float

    def rows(self):
        for i, dt in enumerate(self.dts):
            yield (dt, self.err_euler[i], self.se_euler[i], self.err_taylor2[i], self.se_taylor2[i])


class ReferenceError(ArithmeticError):
    pass


def local_error_study(problem, dts, n, reps, seed, quad_order=4, ref_factor=64, workers=None):
    """One-step weak errors of both schemes against the law-level reference.

    For each replicate a fresh initial ensemble is drawn. Given the ensemble,
    scheme and reference share the same stochastic convolution, so the
    noise integrates out in closed form and the weak error of
    E[cos u_1] + E||u||^2 is a deterministic function of the ensemble.
    Errors are averaged (absolute values) over replicates.
    """
    dts = np.sort(np.asarray(dts, dtype=float))
    ratio = np.log2(dts)
    if np.any(np.abs(ratio - np.round(ratio)) > 1e-12):
        raise DomainError("step sizes must be dyadic")
    h = dts[0] / ref_factor
    errs = {"euler": [], "taylor2": []}
    per_obs = {"euler": [], "taylor2": []}
    spread = 0.0

    def one_rep(r):
        state = initial_state(problem, n, child_seed(seed, r))
        x0 = state.particles
        flow = LawFlow(problem, x0, h / 2, dts[-1])
        out = {}
        for name in ("euler", "taylor2"):
            e_row, o_row = [], []
            for dt in dts:
                ref = weak_observables(problem, x0, flow.at(dt), dt)
                got = weak_observables(problem, x0, scheme_drift(problem, name, x0, dt, quad_order), dt)
                diff = np.abs(got - ref)
                e_row.append(diff.sum())
                o_row.append(diff)
            out[name] = (e_row, o_row)
        return out, flow.spread

    results = _map(one_rep, range(reps), workers)
    for out, sp in results:
        spread = max(spread, sp)
        for name in errs:
            errs[name].append(out[name][0])
            per_obs[name].append(out[name][1])
    E = {k: np.array(v) for k, v in errs.items()}
    mean = {k: v.mean(axis=0) for k, v in E.items()}
    se = {k: v.std(axis=0, ddof=1) / math.sqrt(reps) if reps > 1 else np.zeros(len(dts)) for k, v in E.items()}
    coarsest = min(mean["euler"][-1], mean["taylor2"][-1])
    if spread > 0.1 * coarsest:
        raise ReferenceError(
            f"reference error estimate {spread:.3e} exceeds 10% of the coarsest error {coarsest:.3e}"
        )
    obs = {k: np.mean(np.array(v), axis=0) for k, v in per_obs.items()}
    return LocalErrorTable(
        dts,
        mean["euler"],
        mean["taylor2"],
        se["euler"],
        se["taylor2"],
        fit_slope(dts, mean["euler"]),
        fit_slope(dts, mean["taylor2"]),
        obs,
        spread,
    )
