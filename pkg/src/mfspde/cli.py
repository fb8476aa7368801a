"""Command-line front end: ``mfspde <subcommand> --config FILE [overrides]``.

Exit codes: 0 success, 1 assertion failure, 2 configuration error,
3 numerical abort. Every subcommand writes ``<out>/<subcommand>.csv``.
"""

import argparse
import csv
import math
import os
import sys

import numpy as np

from . import ito, lions, sim, zoo
from .config import SCHEMES, ConfigError, SchemeConfig, override, parse_config, validate
from .hilbert import r0_check
from .measures import DiscreteMeasure, Ensemble, MeasureError
from .rng import child_seed, stream

EXIT_ASSERT, EXIT_CONFIG, EXIT_NUMERIC = 1, 2, 3


class CheckFailed(AssertionError):
    pass


def fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def write_csv(path, header, rows, comments=()):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        w = csv.writer(fh, quoting=csv.QUOTE_MINIMAL, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(x) for x in r])
    return path


# ---------------------------------------------------------------------------
# builders


def build_drift(cfg):
    d = cfg.dim
    i = np.arange(1, d + 1, dtype=float)
    v = cfg.diag(cfg.v, "v") if cfg.v else 1.0 / i
    if cfg.w:
        w = cfg.diag(cfg.w, "w")
    else:
        w = np.zeros(d)
        w[0] = 1.0
        if d > 1:
            w[1] = 0.5
    return zoo.MeanFieldDrift(v, w, zoo.SCALARS[cfg.phi], zoo.SCALARS[cfg.psi])


def build_problem(cfg):
    if not cfg.drift.startswith("drift:"):
        raise ConfigError(f"simulation needs a drift fixture, got {cfg.drift!r}")
    i = np.arange(1, cfg.dim + 1, dtype=float)
    mean = i**-cfg.u0_decay
    return sim.MfSpdeProblem(
        cfg.spectrum(), cfg.diag(cfg.B, "B"), cfg.diag(cfg.Q, "Q"), build_drift(cfg),
        mean, cfg.u0_spread * mean, cfg.T,
    )


def build_functional(cfg):
    name = cfg.drift
    if name in ("gausscdf", "convex") and cfg.dim != 1:
        raise ConfigError(f"{name} is defined for dim = 1")
    if name == "gausscdf":
        return zoo.GaussCdfFunctional()
    if name == "convex":
        return zoo.ConvCounterexample(m=cfg.grid_m)
    if name.startswith("drift:"):
        return build_drift(cfg)
    return zoo.fixture(name)


def _uniform_case(cfg):
    return cfg.drift in ("gausscdf", "convex")


def random_measure(cfg, rng):
    k = min(cfg.atoms, cfg.particles)
    if _uniform_case(cfg):
        atoms = rng.uniform(-0.5, 1.5, size=(k, cfg.dim))
    else:
        atoms = rng.standard_normal((k, cfg.dim))
    counts = 1 + rng.multinomial(cfg.particles - k, np.full(k, 1.0 / k))
    return DiscreteMeasure(atoms, counts / cfg.particles)


# ---------------------------------------------------------------------------
# subcommands


def cmd_lderiv(cfg):
    f = build_functional(cfg)
    metric = getattr(f, "u_metric", None)
    mu = random_measure(cfg, stream(child_seed(cfg.seed, 1), 0))
    rn = lions.discrete_rn(f, mu, max_particles=cfg.particles)
    rows, worst = [], 0.0
    for k, (x, g) in enumerate(zip(mu.atoms, rn)):
        if hasattr(f, "rn"):
            c = np.atleast_2d(f.rn(mu, x))
            cn, err = lions.op_norm(c, metric), lions.op_norm(g - c, metric)
            worst = max(worst, err / max(1.0, cn))
        else:
            cn = err = float("nan")
        rows.append([k, *x, lions.op_norm(g, metric), cn, err])
    header = ["atom_id", *[f"x{i}" for i in range(cfg.dim)], "op_norm", "closedform_norm", "abs_err"]
    return header, rows, (worst <= 1e-4, f"max relative error {worst:.3e}")


def cmd_twovar(cfg):
    f = build_functional(cfg)
    rng = stream(child_seed(cfg.seed, 2), 0)
    if _uniform_case(cfg):
        X = rng.uniform(0.0, 1.0, size=(cfg.particles, 1))
    else:
        X = rng.standard_normal((cfg.particles, cfg.dim))
    blocks = cfg.blocks_list()
    if min(blocks) < 1 or max(blocks) > cfg.particles:
        raise ConfigError(f"blocks must lie in 1..particles = {cfg.particles}, got {blocks}")
    levels = lions.two_variation_estimate(f, X, blocks)
    rows = [[lv.blocks, lv.lower_bound, lv.total_variation] for lv in levels]
    L = [lv.lower_bound for lv in levels]
    ok = all(b >= a - 1e-10 * max(1.0, a) for a, b in zip(L, L[1:]))
    ok &= all(lv.total_variation <= lv.lower_bound * math.sqrt(lv.mass) * (1 + 1e-12) for lv in levels)
    return ["blocks", "lower_bound", "total_variation"], rows, (ok, "refinement monotonicity and interpolation bound")


def cmd_diverge(cfg):
    ns = cfg.n_values()
    signed = zoo.divergence_diagnostic(ns)
    unsigned = zoo.divergence_diagnostic(ns, kernel=zoo.prodmaj_kernel)
    rows = [[n, s, r, p, u[1]] for (n, s, r, p), u in zip(signed, unsigned)]
    S = [r[1] for r in signed]
    ok = all(r[3] for r in signed) and all(b >= a for a, b in zip(S, S[1:]))
    return ["n", "S_n", "sqrt_ln_n", "pass", "S_n_unsigned"], rows, (ok, "S_n >= sqrt(ln n) and monotone")


def cmd_simulate(cfg):
    problem = build_problem(cfg)
    rows, _ = sim.simulate(problem, SCHEMES[cfg.scheme], cfg.dt, cfg.particles, cfg.seed, cfg.T, cfg.quad_order)
    return list(sim.OBSERVABLES), [[r[k] for k in sim.OBSERVABLES] for r in rows], (True, "")


def cmd_converge(cfg):
    problem = build_problem(cfg)
    rep = r0_check(problem.spectrum, problem.B, problem.Q, T=cfg.T)
    order = 2.0 + min(rep.gamma, rep.delta)
    tab = sim.local_error_study(problem, cfg.dt_values(), cfg.particles, cfg.reps, cfg.seed, cfg.quad_order)
    rows = [list(r) for r in tab.rows()]
    rows.append(["slope", tab.slope_euler, "", tab.slope_taylor2, ""])
    ok = tab.slope_taylor2 >= order - 0.3 and tab.slope_taylor2 > tab.slope_euler
    note = f"gamma={rep.gamma} delta={rep.delta:.4f} target slope {order - 0.3:.4f}"
    return ["dt", "weak_err_e", "se_e", "weak_err_t2", "se_t2"], rows, (ok, note)


def cmd_verify_ito(cfg):
    dts = cfg.dt_values()
    rows, ok = [], True
    if cfg.formula in ("flow", "both"):
        proc = ito.constant_process(cfg.dim, b=0.3, T=cfg.T, switch=cfg.T / 2)
        f = ito.BumpFlow(np.eye(cfg.dim)[0], cfg.alpha, zoo.SCALARS[cfg.psi])
        law = "exact" if cfg.mode == "expected" else "empirical"
        tab = ito.flow_residual_table(proc, f, dts, cfg.particles, cfg.seed, cfg.reps, law)
        rows += [["flow", *r, tab.fitted_rate] for r in tab.rows]
        if law == "exact":
            ok &= tab.fitted_rate >= 0.7 and tab.monotone()
    if cfg.formula in ("mild", "both"):
        problem = build_problem(cfg)
        f = ito.MildTestFunctional(cfg.alpha, zoo.SCALARS["cos"], zoo.SCALARS[cfg.psi])
        tab = ito.mild_residual_table(problem, f, dts, cfg.particles, cfg.seed, cfg.T, cfg.mode)
        rows += [["mild", *r, tab.fitted_rate] for r in tab.rows]
        if cfg.mode == "expected":
            ok &= tab.fitted_rate >= 0.7 and tab.monotone()
    header = ["formula", "dt", "n", "mean_residual", "sd_residual", "fitted_rate"]
    return header, rows, (ok, "fitted rate >= 0.7 and monotone")


def cmd_selftest(cfg):
    from .selftest import run_all

    results = run_all()
    rows = [[name, passed, detail] for name, passed, detail in results]
    return ["check", "passed", "detail"], rows, (all(r[1] for r in results), f"{sum(r[1] for r in results)}/{len(results)} passed")


COMMANDS = {
    "lderiv": cmd_lderiv,
    "twovar": cmd_twovar,
    "diverge": cmd_diverge,
    "simulate": cmd_simulate,
    "converge": cmd_converge,
    "verify-ito": cmd_verify_ito,
    "selftest": cmd_selftest,
}


def make_parser():
    p = argparse.ArgumentParser(prog="mfspde", description=__doc__.splitlines()[0])
    p.add_argument("subcommand", choices=sorted(COMMANDS))
    p.add_argument("--config", help="INI-style config file")
    p.add_argument("--dt", type=float)
    p.add_argument("--T", type=float)
    p.add_argument("--particles", type=int)
    p.add_argument("--seed", type=lambda s: int(s, 0))
    p.add_argument("--out")
    return p


def main(argv=None):
    args = make_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config) if args.config else validate(SchemeConfig())
        cfg = override(cfg, dt=args.dt, T=args.T, particles=args.particles, seed=args.seed, out=args.out)
        header, rows, (ok, note) = COMMANDS[args.subcommand](cfg)
        path = write_csv(os.path.join(cfg.out, f"{args.subcommand}.csv"), header, rows)
    except (ConfigError, MeasureError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    status = "ok" if ok else "FAILED"
    print(f"{args.subcommand}: {status} {note} -> {path}")
    return 0 if ok else EXIT_ASSERT


if __name__ == "__main__":
    sys.exit(main())
