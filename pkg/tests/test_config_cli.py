import csv
import os
import subprocess
import sys

import numpy as np
import pytest

from mfspde import cli
from mfspde.config import ConfigError, SchemeConfig, diag_values, override, parse_config, parse_text, validate


def test_defaults_validate():
    cfg = validate(SchemeConfig())
    assert cfg.dim == 1 and cfg.scheme == "taylor2"


def test_parse_full():
    cfg = parse_text(
        "[spectrum]\ndim = 4\nlambda = dirichlet\n\n[noise]\nB = decay:1\nQ = 1\n"
        "[drift]\nname = drift:tanh-bump\n[run]\nscheme = euler\ndt = 0.125\nT = 0.5\nseed = 0x10\n"
    )
    assert cfg.dim == 4 and cfg.scheme == "euler" and cfg.seed == 16
    assert np.allclose(cfg.spectrum().eigenvalues, (np.arange(1, 5) * np.pi) ** 2)
    assert cfg.source["dt"] == 12


@pytest.mark.parametrize(
    "text,line",
    [
        ("[run]\ndt = 0.1\ndt = 0.2\n", 3),
        ("[run]\nbogus = 1\n", 2),
        ("[weird]\nx = 1\n", 1),
        ("dt = 0.1\n", 1),
        ("[run]\ndt 0.1\n", 2),
        ("[run]\nparticles = many\n", 2),
        ("[run]\nT = 1\n[run]\nT = 2\n", 3),
    ],
)
def test_parse_errors_carry_line(text, line):
    with pytest.raises(ConfigError) as exc:
        parse_text(text, "f.ini")
    assert f"f.ini:{line}:" in str(exc.value)


@pytest.mark.parametrize(
    "text",
    [
        "[run]\nscheme = rk4\n",
        "[run]\ndt = 0.3\nT = 1\n",
        "[run]\nseed = -1\n",
        "[run]\nmode = sometimes\n",
        "[drift]\nname = nonsense\n",
        "[drift]\nphi = exp\n",
        "[noise]\nQ = -1\n",
        "[spectrum]\ndim = 2\nlambda = 1, 2, 3\n",
        "[spectrum]\ndim = 0\n",
    ],
)
def test_validation_errors(text):
    with pytest.raises(ConfigError):
        parse_text(text)


def test_diag_values():
    assert np.allclose(diag_values("decay:2", 3), [1, 0.25, 1 / 9])
    assert np.allclose(diag_values("0.5", 3), [0.5] * 3)
    assert np.allclose(diag_values("1, 2,3", 3), [1, 2, 3])
    with pytest.raises(ConfigError):
        diag_values("1,2", 3)


def test_override_precedence(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[run]\ndt = 0.125\nT = 0.5\nparticles = 10\n")
    cfg = parse_config(p)
    new = override(cfg, dt=0.0625, particles=None)
    assert new.dt == 0.0625 and new.particles == 10 and cfg.dt == 0.125
    with pytest.raises(ConfigError):
        override(cfg, dt=0.3)
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "missing.ini")


def test_fmt():
    assert cli.fmt(True) == "true"
    assert cli.fmt(np.int64(3)) == "3"
    assert cli.fmt(0.1) == "0.10000000000000001"
    assert float(cli.fmt(np.pi)) == np.pi


def _write(tmp_path, text):
    p = tmp_path / "c.ini"
    p.write_text(text)
    return str(p)


def _read(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_selftest_command(tmp_path, capsys):
    assert cli.main(["selftest", "--out", str(tmp_path)]) == 0
    rows = _read(tmp_path / "selftest.csv")
    assert rows[0] == ["check", "passed", "detail"]
    assert all(r[1] == "true" for r in rows[1:]) and len(rows) == 13


@pytest.mark.parametrize(
    "cmd,text",
    [
        ("lderiv", "[spectrum]\ndim = 2\n[run]\nparticles = 64\n"),
        ("lderiv", "[drift]\nname = gausscdf\n[run]\nparticles = 64\n"),
        ("lderiv", "[spectrum]\ndim = 3\n[drift]\nname = linear:sin\n[run]\nparticles = 32\n"),
        ("twovar", "[drift]\nname = linear:square\n[run]\nparticles = 64\nblocks = 1,2,4,8\n"),
        ("twovar", "[drift]\nname = convex\ngrid_m = 101\n[run]\nparticles = 32\nblocks = 1,2,4\n"),
        ("diverge", "[run]\nn_list = 1,4,16\n"),
        ("simulate", "[spectrum]\ndim = 4\n[run]\ndt = 0.0625\nT = 0.25\nparticles = 16\n"),
        ("verify-ito", "[spectrum]\ndim = 3\n[run]\nT = 0.5\nparticles = 16\nreps = 2\ndt_list = 0.0625,0.03125,0.015625\n"),
    ],
)
def test_commands_succeed(cmd, text, tmp_path):
    assert cli.main([cmd, "--config", _write(tmp_path, text), "--out", str(tmp_path)]) == 0
    rows = _read(tmp_path / f"{cmd}.csv")
    assert len(rows) > 1


def test_converge_command(tmp_path):
    text = "[spectrum]\ndim = 8\n[run]\nparticles = 64\nreps = 2\ndt_list = 0.015625,0.0078125,0.00390625\n"
    code = cli.main(["converge", "--config", _write(tmp_path, text), "--out", str(tmp_path)])
    rows = _read(tmp_path / "converge.csv")
    assert rows[0] == ["dt", "weak_err_e", "se_e", "weak_err_t2", "se_t2"]
    assert rows[-1][0] == "slope"
    assert code in (0, 1)


def test_exit_codes(tmp_path, capsys):
    assert cli.main(["simulate", "--config", _write(tmp_path, "[run]\ndt = 0.1\ndt = 0.2\n")]) == 2
    assert "config error" in capsys.readouterr().err
    assert cli.main(["lderiv", "--config", _write(tmp_path, "[spectrum]\ndim = 2\n[drift]\nname = gausscdf\n")]) == 2
    assert cli.main(["simulate", "--config", _write(tmp_path, "[drift]\nname = linear:id\n")]) == 2
    # blocks above the particle count cannot be formed
    bad = "[drift]\nname = linear:square\n[run]\nparticles = 4\nblocks = 8\n"
    assert cli.main(["twovar", "--config", _write(tmp_path, bad), "--out", str(tmp_path)]) != 0


def test_numerical_abort_exit_code(tmp_path, monkeypatch):
    def boom(cfg):
        raise ArithmeticError("non-finite")

    monkeypatch.setitem(cli.COMMANDS, "simulate", boom)
    assert cli.main(["simulate", "--out", str(tmp_path)]) == 3


def test_assertion_exit_code(tmp_path, monkeypatch):
    monkeypatch.setitem(cli.COMMANDS, "diverge", lambda cfg: (["a"], [[1]], (False, "forced")))
    assert cli.main(["diverge", "--out", str(tmp_path)]) == 1


def test_csv_byte_identical_across_threads(tmp_path):
    text = "[spectrum]\ndim = 4\n[run]\ndt = 0.0625\nT = 0.25\nparticles = 32\n"
    cfg = _write(tmp_path, text)
    outs = []
    for threads in ("1", "4"):
        out = tmp_path / f"t{threads}"
        env = dict(os.environ, MFSPDE_THREADS=threads)
        subprocess.run([sys.executable, "-m", "mfspde.cli", "simulate", "--config", cfg, "--out", str(out)],
                       check=True, env=env, capture_output=True)
        outs.append((out / "simulate.csv").read_bytes())
    assert outs[0] == outs[1]


def test_flags_override_file(tmp_path):
    text = "[spectrum]\ndim = 2\n[run]\ndt = 0.0625\nT = 0.25\nparticles = 16\nseed = 1\n"
    cfg = _write(tmp_path, text)
    cli.main(["simulate", "--config", cfg, "--out", str(tmp_path), "--T", "0.125", "--seed", "0x2"])
    rows = _read(tmp_path / "simulate.csv")
    assert float(rows[-1][0]) == 0.125
