"""Fast invariant suite behind ``mfspde selftest``."""

import math

import numpy as np

from . import hilbert, ito, lions, sim, zoo
from .config import ConfigError, parse_text
from .measures import DiscreteMeasure, Ensemble
from .rng import splitmix64


def _seeding():
    # first SplitMix64 output from state 0
    return splitmix64(0) == 0xE220A8397B1DCDAF, hex(splitmix64(0))


def _conv_variance():
    s = hilbert.Spectrum(np.array([1.0]))
    v = hilbert.conv_variance(s, np.ones(1), np.ones(1), 0.1)[0]
    return abs(v - (1 - math.exp(-0.2)) / 2) < 1e-15, f"{v!r}"


def _law_invariance():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((40, 2))
    f = zoo.linear_square()
    a = lions.lift_eval(f, x)
    b = lions.lift_eval(f, x[rng.permutation(40)])
    return np.array_equal(a, b), "bitwise"


def _linear_rn():
    mu = DiscreteMeasure([[0.5, -1.0], [2.0, 0.3], [-0.7, 1.1]], [0.25, 0.5, 0.25])
    f = zoo.linear_square()
    rn = lions.discrete_rn(f, mu)
    err = max(np.max(np.abs(g - f.jacobian(x))) for g, x in zip(rn, mu.atoms))
    return err < 1e-6, f"{err:.2e}"


def _gausscdf():
    f = zoo.GaussCdfFunctional()
    val = float(f.deriv(DiscreteMeasure.dirac([0.0]), 0.0))
    mu = DiscreteMeasure([[-0.3], [0.4], [1.2]], [0.25, 0.5, 0.25])
    rn = lions.discrete_rn(f, mu)[:, 0, 0]
    err = np.max(np.abs(rn - f.deriv(mu, mu.atoms[:, 0])))
    return abs(val + 1 / math.sqrt(2 * math.pi)) < 1e-15 and err < 1e-5, f"dirac {val:.6f}, fd {err:.2e}"


def _drift():
    d = zoo.tanh_bump_drift(3)
    rng = np.random.default_rng(2)
    E = Ensemble(rng.standard_normal((24, 3)))
    rn = lions.discrete_rn(d, E.law)
    err = max(np.max(np.abs(g - d.dmu(E.law, x))) for g, x in zip(rn, E.law.atoms))
    return err < 1e-5, f"{err:.2e}"


def _half_atom():
    f = zoo.GaussCdfFunctional()
    E = DiscreteMeasure([[0.2], [0.9]], [0.5, 0.5]).realize(min_particles=8)
    ev = E.atom_events()[0]
    half = lions.block_operator(f, E.particles, ev[: len(ev) // 2])
    full = lions.block_operator(f, E.particles, ev)
    err = float(np.max(np.abs(half - 0.5 * full)))
    return err < 1e-6, f"{err:.2e}"


def _prodmaj_limit():
    lo = zoo.prodmaj_kernel(1 - 1e-14, 0.0)
    hi = zoo.prodmaj_kernel(1 + 1e-14, 0.0)
    return abs(lo - math.pi) < 1e-6 and abs(hi - math.pi) < 1e-6, f"{lo:.8f} {hi:.8f}"


def _divergence():
    rows = zoo.divergence_diagnostic([4, 16])
    return all(r[3] for r in rows) and rows[1][1] >= rows[0][1], f"S_4={rows[0][1]:.4f}"


def _exp_weights():
    x, w = sim._gl01(4)
    W = sim.exp_weights(np.zeros(1), 0.3, x)[:, 0]
    return np.allclose(W, 0.3 * w, rtol=1e-13, atol=0), "lambda=0 gives Gauss-Legendre"


def _flow_linear():
    proc = ito.constant_process(3, b=[0.2, -0.1, 0.4], sigma=0.0, T=0.5)
    rep = ito.verify_flow_ito(proc, ito.LinearFlow(np.array([1.0, 2.0, -1.0])), 0.05, 16, 7)
    return rep.residual <= 1e-10, f"{rep.residual:.2e}"


def _config():
    try:
        parse_text("[run]\ndt = 0.1\ndt = 0.2\n")
    except ConfigError as exc:
        return ":3:" in str(exc), str(exc)
    return False, "duplicate accepted"


CHECKS = [
    ("seeding", _seeding),
    ("conv_variance", _conv_variance),
    ("law_invariance", _law_invariance),
    ("linear_rn", _linear_rn),
    ("gausscdf_deriv", _gausscdf),
    ("drift_dmu", _drift),
    ("half_atom_scale", _half_atom),
    ("prodmaj_limit", _prodmaj_limit),
    ("divergence", _divergence),
    ("exp_weights", _exp_weights),
    ("flow_ito_linear", _flow_linear),
    ("config_duplicate", _config),
]


def run_all():
    out = []
    for name, check in CHECKS:
        try:
            ok, detail = check()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append((name, bool(ok), detail))
    return out
