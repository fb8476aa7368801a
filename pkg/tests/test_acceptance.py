"""Acceptance criteria, one test each. Every test prints a PASS/FAIL line;
the lines are repeated in the terminal summary (see conftest.py)."""

import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest
from scipy.integrate import quad

from mfspde import ito, lions, sim, zoo
from mfspde.hilbert import r0_check
from mfspde.measures import Ensemble

RESULTS = {}


def report(num, ok, detail):
    line = f"criterion {num}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[num] = line
    print(line)
    return ok


def random_ensemble(rng, d, max_atoms=10, max_n=2048, even=False):
    """Particles realising a random discrete law with N <= max_atoms atoms, n <= max_n."""
    N = int(rng.integers(1, max_atoms + 1))
    n = int(rng.integers(2 * N, max_n + 1)) // (2 if even else 1)
    counts = 1 + rng.multinomial(n - N, np.full(N, 1.0 / N))
    if even:
        counts = 2 * counts
    atoms = rng.uniform(-0.5, 1.5, (N, d)) if d == 1 else rng.standard_normal((N, d))
    X = np.repeat(atoms, counts, axis=0)
    return Ensemble(X[rng.permutation(len(X))])


FUNCTIONALS = [
    ("linear", lambda: zoo.linear_square(), 2),
    ("gausscdf", lambda: zoo.GaussCdfFunctional(), 1),
    ("drift", lambda: zoo.tanh_bump_drift(3), 3),
]


def test_criterion_1_factorization():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = {}
    for name, make, d in FUNCTIONALS:
        f = make()
        w = 0.0
        for _ in range(20):
            E = random_ensemble(rng, d)
            Ys = [rng.standard_normal((len(E.law), d))[E.atom_index], rng.standard_normal((E.n, d))]
            w = max(w, lions.factorization_check(f, E, Ys))
        worst[name] = w
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and elapsed < 120
    detail = " ".join(f"{k}={v:.2e}" for k, v in worst.items())
    assert report(1, ok, f"max residual {detail} (< 1e-4), {elapsed:.1f}s"), RESULTS[1]


def test_criterion_2_disintegration():
    rng = np.random.default_rng(202)
    t0 = time.perf_counter()
    worst = half_worst = 0.0
    for i in range(50):
        name, make, d = FUNCTIONALS[i % 3]
        f = make()
        E = random_ensemble(rng, d, max_n=512, even=True)
        events = E.atom_events()
        k = int(rng.integers(len(events)))
        ev = events[k]
        kind = i % 4
        if kind == 0:  # half of one atom
            A = ev[: len(ev) // 2]
            rep = lions.disintegration_check(f, E, A)
            half_worst = max(half_worst, lions.op_norm(rep.direct - 0.5 * lions.block_operator(f, E.particles, ev)))
        elif kind == 1:  # random subset
            A = rng.choice(E.n, size=int(rng.integers(1, E.n + 1)), replace=False)
            rep = lions.disintegration_check(f, E, A)
        elif kind == 2:  # whole atom
            rep = lions.disintegration_check(f, E, ev)
        else:  # union of atoms plus part of another
            A = np.concatenate([events[j] for j in range(0, len(events), 2)] + [ev[: len(ev) // 3]])
            rep = lions.disintegration_check(f, E, A)
        worst = max(worst, rep.residual)
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-5 and half_worst < 1e-5 and elapsed < 60
    assert report(2, ok, f"max residual {worst:.2e}, half-atom {half_worst:.2e} (< 1e-5), {elapsed:.1f}s"), RESULTS[2]


def test_criterion_3_norm_identity():
    rng = np.random.default_rng(303)
    t0 = time.perf_counter()
    X = rng.standard_normal((512, 1))
    lv = lions.two_variation_estimate(zoo.linear_square(), X, [64])[0]
    target = math.sqrt(np.mean((2 * X[:, 0]) ** 2))
    ratio = lv.lower_bound / target
    elapsed = time.perf_counter() - t0
    ok = abs(ratio - 1) <= 0.05 and lv.lower_bound <= target * (1 + 1e-6) and elapsed < 60
    assert report(3, ok, f"L_64 = {lv.lower_bound:.6f}, target {target:.6f}, ratio {ratio:.5f}, {elapsed:.1f}s"), RESULTS[3]


def _kernel_quad(D, signed=False):
    lo, hi = D - 1, 1.0
    f = lambda t: 1 / math.sqrt(abs(t) * abs(t - D))
    g = (lambda t: np.sign(t) * np.sign(t - D) * f(t)) if signed else f
    edges = [lo, *sorted(p for p in {0.0, D} if lo < p < hi), hi]
    return sum(quad(g, a, b, limit=200, epsabs=1e-12, epsrel=1e-12)[0] for a, b in zip(edges[:-1], edges[1:]))


@pytest.mark.filterwarnings("ignore::scipy.integrate.IntegrationWarning")
def test_criterion_4_divergence():
    t0 = time.perf_counter()
    rows = zoo.divergence_diagnostic([4, 16, 64, 256])
    S = [r[1] for r in rows]
    bound_ok = all(s >= math.sqrt(math.log(n)) * (1 - 1e-3) for n, s, *_ in rows)
    mono = all(b >= a for a, b in zip(S, S[1:]))
    rng = np.random.default_rng(404)
    err_u = err_s = 0.0
    for _ in range(100):
        x, D = rng.uniform(-1, 1), rng.uniform(0.01, 1.99)
        xt = x + D * rng.choice([-1, 1])
        ref_u = _kernel_quad(D)
        ref_s = _kernel_quad(D, signed=True)
        err_u = max(err_u, abs(zoo.prodmaj_kernel(x, xt) - ref_u) / max(1.0, abs(ref_u)))
        err_s = max(err_s, abs(zoo.signed_kernel(x, xt) - ref_s) / max(1.0, abs(ref_s)))
    lim = max(abs(zoo.prodmaj_kernel(1 - 1e-14, 0.0) - math.pi), abs(zoo.prodmaj_kernel(1 + 1e-14, 0.0) - math.pi))
    elapsed = time.perf_counter() - t0
    ok = bound_ok and mono and err_u < 1e-5 and err_s < 1e-5 and lim < 1e-6 and elapsed < 120
    s_txt = ", ".join(f"S_{n}={s:.4f}" for n, s, *_ in rows)
    detail = f"{s_txt}; kernel err {err_u:.1e} (signed {err_s:.1e}); |D|->1 limit err {lim:.1e}; {elapsed:.1f}s"
    assert report(4, ok, detail), RESULTS[4]


def test_criterion_5_derivative_oracles():
    rng = np.random.default_rng(505)
    t0 = time.perf_counter()
    g = zoo.GaussCdfFunctional()
    b = zoo.tanh_bump_drift(3)
    rel_g = rel_b = rel_dy = 0.0
    for _ in range(20):
        mu = random_ensemble(rng, 1, max_n=256).law
        fd = lions.discrete_rn(g, mu)[:, 0, 0]
        cf = g.deriv(mu, mu.atoms[:, 0])
        rel_g = max(rel_g, np.max(np.abs(fd - cf)) / np.max(np.abs(cf)))
        mu = random_ensemble(rng, 3, max_n=256).law
        fd = lions.discrete_rn(b, mu)
        cf = np.stack([b.dmu(mu, x) for x in mu.atoms])
        rel_b = max(rel_b, np.max(np.abs(fd - cf)) / np.max(np.abs(cf)))
        # second derivative in y against FD of the first
        y, h1, h2 = rng.standard_normal((3, 3))
        e = 1e-5
        fd2 = (b.dmu(mu, y + e * h2) - b.dmu(mu, y - e * h2)) @ h1 / (2 * e)
        cf2 = b.dydmu(mu, y)(h1, h2)
        rel_dy = max(rel_dy, np.max(np.abs(fd2 - cf2)) / max(np.max(np.abs(cf2)), 1e-300))
    elapsed = time.perf_counter() - t0
    ok = max(rel_g, rel_b, rel_dy) < 1e-4 and elapsed < 60
    assert report(5, ok, f"rel err gausscdf {rel_g:.1e}, drift d_mu {rel_b:.1e}, d_y d_mu {rel_dy:.1e}, {elapsed:.1f}s"), RESULTS[5]


def test_criterion_6_ito_residuals():
    t0 = time.perf_counter()
    dts = [2.0**-7, 2.0**-8, 2.0**-9, 2.0**-10]
    proc = ito.constant_process(8, b=0.3, T=0.5, switch=0.25)
    flow = ito.flow_residual_table(proc, ito.BumpFlow(np.eye(8)[0], 0.5), dts, 512, 6, reps=4)
    problem = sim.tanh_bump_problem(dim=8, T=0.5)
    mild = ito.mild_residual_table(problem, ito.MildTestFunctional(), dts, 512, 6)
    elapsed = time.perf_counter() - t0
    ok = all(t.fitted_rate >= 0.7 and t.monotone() for t in (flow, mild)) and elapsed < 600
    res = lambda t: "/".join(f"{r[2]:.2e}" for r in t.rows)
    detail = (f"flow rate {flow.fitted_rate:.3f} [{res(flow)}], mild rate {mild.fitted_rate:.3f} [{res(mild)}], "
              f"{elapsed:.1f}s")
    assert report(6, ok, detail), RESULTS[6]


def test_criterion_7_taylor_order():
    t0 = time.perf_counter()
    problem = sim.tanh_bump_problem(dim=16)
    rep = r0_check(problem.spectrum, problem.B, problem.Q, T=problem.T)
    target = 2.0 + min(rep.gamma, rep.delta) - 0.3
    dts = [2.0**-k for k in range(4, 9)]
    tab = sim.local_error_study(problem, dts, 1024, 32, seed=7)
    elapsed = time.perf_counter() - t0
    ok = tab.slope_taylor2 >= target and tab.slope_taylor2 > tab.slope_euler and elapsed < 1800
    detail = (f"gamma={rep.gamma} delta={rep.delta:.4f}; taylor2 slope {tab.slope_taylor2:.3f} (>= {target:.3f}), "
              f"exp-euler slope {tab.slope_euler:.3f}, {elapsed:.1f}s")
    assert report(7, ok, detail), RESULTS[7]


CONFIGS = {
    "lderiv": "[spectrum]\ndim = 2\n[run]\nparticles = 64\n",
    "twovar": "[drift]\nname = linear:square\n[run]\nparticles = 128\nblocks = 1,4,16\n",
    "diverge": "[run]\nn_list = 1,4,16,64\n",
    "simulate": "[spectrum]\ndim = 4\n[run]\ndt = 0.0625\nT = 0.25\nparticles = 64\n",
    "converge": "[spectrum]\ndim = 8\n[run]\nparticles = 64\nreps = 4\ndt_list = 0.015625,0.0078125,0.00390625\n",
    "verify-ito": "[spectrum]\ndim = 3\n[run]\nT = 0.5\nparticles = 32\nreps = 2\ndt_list = 0.0625,0.03125\n",
    "selftest": "",
}


def test_criterion_8_determinism(tmp_path):
    t0 = time.perf_counter()
    bad = []
    for cmd, text in CONFIGS.items():
        cfg = tmp_path / f"{cmd}.ini"
        cfg.write_text(text)
        blobs = []
        for threads in ("1", "4", "4"):
            out = tmp_path / f"{cmd}-{threads}-{len(blobs)}"
            env = dict(os.environ, MFSPDE_THREADS=threads)
            subprocess.run([sys.executable, "-m", "mfspde.cli", cmd, "--config", str(cfg), "--seed", "12345",
                            "--out", str(out)], env=env, capture_output=True)
            path = out / f"{cmd}.csv"
            blobs.append(path.read_bytes() if path.exists() else None)
        if blobs[0] is None or len(set(blobs)) != 1:
            bad.append(cmd)
    elapsed = time.perf_counter() - t0
    ok = not bad
    detail = f"{len(CONFIGS)} subcommands byte-identical across runs and MFSPDE_THREADS=1/4" if ok else f"differ: {bad}"
    assert report(8, ok, f"{detail}, {elapsed:.1f}s"), RESULTS[8]


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
