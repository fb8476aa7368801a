"""Strict INI-style experiment configuration.

Layout::

    [spectrum]
    dim = 16
    lambda = dirichlet        # or a comma-separated list
    kappa = 0

    [noise]
    B = decay:1               # i^-1; or a number, or a list
    Q = 1

    [drift]
    name = drift:tanh-bump    # also the functional for lderiv / twovar

    [run]
    scheme = taylor2
    dt = 0.0625
    ...

Unknown sections and keys are errors; so are duplicates and lines without
``=``. Errors carry the offending line number.
"""

import configparser
import re
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .hilbert import DomainError, Spectrum
from .rng import MASK64


class ConfigError(ValueError):
    pass


SCHEMA = {
    "spectrum": {"dim", "lambda", "kappa"},
    "noise": {"B", "Q"},
    "drift": {"name", "v", "w", "phi", "psi", "grid_m"},
    "run": {
        "scheme", "dt", "T", "particles", "seed", "quad_order", "out",
        "atoms", "blocks", "n_list", "dt_list", "reps", "mode", "formula",
        "u0_decay", "u0_spread", "alpha",
    },
}
SCHEMES = {"exp-euler": "euler", "euler": "euler", "taylor2": "taylor2"}


@dataclass
class SchemeConfig:
    dim: int = 1
    lam: str = "dirichlet"
    kappa: float = 0.0
    B: str = "decay:1"
    Q: str = "1"
    drift: str = "drift:tanh-bump"
    v: str = ""
    w: str = ""
    phi: str = "tanh"
    psi: str = "bump"
    grid_m: int = 1001
    scheme: str = "taylor2"
    dt: float = 2.0**-6
    T: float = 0.25
    particles: int = 256
    seed: int = 0
    quad_order: int = 4
    out: str = "."
    atoms: int = 6
    blocks: str = "1,2,4,8,16,32,64"
    n_list: str = "1,2,4,8,16,32,64,128,256"
    dt_list: str = "0.0625,0.03125,0.015625,0.0078125,0.00390625"
    reps: int = 8
    mode: str = "expected"
    formula: str = "both"
    u0_decay: float = 2.0
    u0_spread: float = 0.5
    alpha: float = 0.5
    source: dict = field(default_factory=dict, repr=False)

    # ---- typed views

    def spectrum(self):
        try:
            if self.lam.strip().lower() == "dirichlet":
                return Spectrum.dirichlet(self.dim, self.kappa)
            lam = parse_list(self.lam)
            if len(lam) != self.dim:
                raise ConfigError(f"lambda has {len(lam)} entries, dim = {self.dim}")
            return Spectrum(lam, self.kappa)
        except DomainError as exc:
            raise ConfigError(str(exc)) from None

    def diag(self, text, name):
        return diag_values(text, self.dim, name)

    def blocks_list(self):
        return [int(x) for x in parse_list(self.blocks)]

    def n_values(self):
        return [int(x) for x in parse_list(self.n_list)]

    def dt_values(self):
        return [float(x) for x in parse_list(self.dt_list)]


def parse_list(text):
    try:
        return np.array([float(t) for t in re.split(r"[,\s]+", text.strip()) if t])
    except ValueError:
        raise ConfigError(f"cannot parse number list {text!r}") from None


def diag_values(text, dim, name="value"):
    """``decay:p`` -> i^-p; a single number broadcasts; else one entry per mode."""
    text = text.strip()
    if text.startswith("decay:"):
        p = float(text.split(":", 1)[1])
        return np.arange(1, dim + 1, dtype=float) ** -p
    vals = parse_list(text)
    if vals.size == 1:
        return np.full(dim, vals[0])
    if vals.size != dim:
        raise ConfigError(f"{name} has {vals.size} entries, dim = {dim}")
    return vals


_KEYMAP = {"lambda": "lam", "name": "drift"}


def _line_of(lines, section, key):
    current = None
    for no, line in enumerate(lines, 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            current = s[1:-1].strip()
        elif current == section and "=" in s and s.split("=", 1)[0].strip() == key:
            return no
    return None


def _coerce(name, raw):
    kinds = {f.name: f.type for f in fields(SchemeConfig)}
    kind = kinds[name]
    try:
        if kind in (int, "int"):
            return int(raw, 0) if raw.strip().lower().startswith("0x") else int(raw)
        if kind in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name} = {raw!r} is not a valid {kind.__name__ if hasattr(kind, '__name__') else kind}") from None
    return raw.strip()


def parse_text(text, origin="<config>"):
    lines = text.splitlines()
    cp = configparser.ConfigParser(
        strict=True, delimiters=("=",), interpolation=None, comment_prefixes=("#", ";"),
        inline_comment_prefixes=("#",), empty_lines_in_values=False,
    )
    cp.optionxform = str
    try:
        cp.read_string(text, source=origin)
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"{origin}:{exc.lineno}: duplicate key {exc.option!r} in [{exc.section}]") from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"{origin}:{exc.lineno}: duplicate section [{exc.section}]") from None
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError(f"{origin}:{exc.lineno}: key outside any [section]") from None
    except configparser.ParsingError as exc:
        no = exc.errors[0][0] if exc.errors else "?"
        raise ConfigError(f"{origin}:{no}: malformed line (expected 'key = value')") from None
    values = {}
    for section in cp.sections():
        if section not in SCHEMA:
            no = next((i for i, l in enumerate(lines, 1) if l.strip() == f"[{section}]"), "?")
            raise ConfigError(f"{origin}:{no}: unknown section [{section}]")
        for key, raw in cp.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"{origin}:{_line_of(lines, section, key)}: unknown key {key!r} in [{section}]")
            values[_KEYMAP.get(key, key)] = (raw, _line_of(lines, section, key))
    cfg = SchemeConfig()
    for name, (raw, no) in values.items():
        try:
            setattr(cfg, name, _coerce(name, raw))
        except ConfigError as exc:
            raise ConfigError(f"{origin}:{no}: {exc}") from None
    cfg.source = {k: no for k, (_, no) in values.items()}
    return validate(cfg)


def parse_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    return parse_text(text, str(path))


def override(cfg, **flags):
    """CLI flags win over file values; ``None`` means not given."""
    given = {k: v for k, v in flags.items() if v is not None}
    return validate(replace(cfg, **given))


def validate(cfg):
    if cfg.dim < 1:
        raise ConfigError("dim must be positive")
    if cfg.scheme not in SCHEMES:
        raise ConfigError(f"scheme must be one of {sorted(SCHEMES)}, got {cfg.scheme!r}")
    if not cfg.dt > 0 or not cfg.T > 0:
        raise ConfigError("dt and T must be positive")
    steps = cfg.T / cfg.dt
    if abs(steps - round(steps)) > 1e-9:
        raise ConfigError(f"dt = {cfg.dt} does not divide T = {cfg.T}")
    if not 0 <= cfg.seed <= MASK64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    if cfg.particles < 1 or cfg.reps < 1 or cfg.quad_order < 1:
        raise ConfigError("particles, reps and quad_order must be positive")
    if cfg.mode not in ("expected", "pathwise"):
        raise ConfigError("mode must be 'expected' or 'pathwise'")
    if cfg.formula not in ("flow", "mild", "both"):
        raise ConfigError("formula must be 'flow', 'mild' or 'both'")
    from .zoo import FIXTURES, SCALARS

    if cfg.drift not in FIXTURES:
        raise ConfigError(f"unknown fixture {cfg.drift!r}; choose from {sorted(FIXTURES)}")
    for name in (cfg.phi, cfg.psi):
        if name not in SCALARS:
            raise ConfigError(f"unknown scalar fixture {name!r}; choose from {sorted(SCALARS)}")
    cfg.spectrum()
    cfg.diag(cfg.B, "B")
    if np.any(cfg.diag(cfg.Q, "Q") < 0):
        raise ConfigError("Q must be non-negative")
    return cfg
