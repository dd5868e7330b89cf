"""Run configuration and parameter sampling.

Configuration files are INI text read with :mod:`configparser`::

    [run]
    problem = heat            # heat | stokes
    seed = 0
    out = runs/heat
    methods = STD, ST, FUN, STFUN
    eps = 1e-2, 1e-3, 1e-4
    n_mu_train = 80
    n_mu_mdeim = 30
    n_on = 10

    [mesh]
    divisions = 24, 8, 4
    lengths = 4.0, 1.5, 0.2

    [time]
    T = 0.3
    n_steps = 20

    [parameters]
    bounds = 1 10; 1 10; 1 10  # one "low high" pair per parameter

Inline comments start with ``#``. Every key is optional; missing keys take the problem defaults below.
"""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

METHODS = ("STD", "ST", "FUN", "STFUN")

_DEFAULTS = {
    "heat": {"divisions": (24, 8, 4), "lengths": (4.0, 1.5, 0.2), "T": 0.3, "n_steps": 20},
    "stokes": {"divisions": (12, 4, 2), "lengths": (4.0, 1.5, 0.2), "T": 0.15, "n_steps": 16},
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    problem: str = "heat"
    divisions: tuple = (24, 8, 4)
    lengths: tuple = (4.0, 1.5, 0.2)
    T: float = 0.3
    n_steps: int = 20
    bounds: tuple = ((1.0, 10.0), (1.0, 10.0), (1.0, 10.0))
    n_mu_train: int = 80
    n_mu_mdeim: int = 30
    n_on: int = 10
    eps: tuple = (1e-2, 1e-3, 1e-4)
    methods: tuple = METHODS
    seed: int = 0
    out: str = "runs/out"
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.problem not in _DEFAULTS:
            raise ConfigError(f"problem must be heat or stokes, got {self.problem!r}")
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise ConfigError(f"unknown methods {bad}")
        if not self.eps or any(not 0 < e < 1 for e in self.eps):
            raise ConfigError("eps values must lie in (0, 1)")
        if min(self.n_mu_train, self.n_on, self.n_mu_mdeim, self.n_steps) < 1:
            raise ConfigError("sample counts and n_steps must be positive")
        if len(self.divisions) != 3 or len(self.lengths) != 3:
            raise ConfigError("divisions and lengths need three entries")

    @property
    def delta(self) -> float:
        return self.T / self.n_steps

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    def digest(self) -> str:
        """Hash of everything that determines the offline artifacts."""
        d = asdict(self)
        for k in ("out", "n_on", "extras"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in text.replace(",", " ").split())


def _bounds(text: str) -> tuple:
    pairs = [p for p in text.split(";") if p.strip()]
    out = tuple(_floats(p) for p in pairs)
    if any(len(p) != 2 for p in out):
        raise ConfigError(f"bounds need 'low high' pairs separated by ';', got {text!r}")
    return out


def load_config(path=None, text: str | None = None) -> RunConfig:
    """Parse a configuration file (or string); see the module docstring for the grammar."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    cp.optionxform = str
    if text is not None:
        cp.read_string(text)
    elif path is not None:
        if not Path(path).exists():
            raise ConfigError(f"no configuration file at {path}")
        cp.read(path)
    run = cp["run"] if cp.has_section("run") else {}
    problem = run.get("problem", "heat").strip()
    if problem not in _DEFAULTS:
        raise ConfigError(f"problem must be heat or stokes, got {problem!r}")
    base = dict(_DEFAULTS[problem])
    kw: dict = {"problem": problem, **base}
    if cp.has_section("mesh"):
        m = cp["mesh"]
        if "divisions" in m:
            kw["divisions"] = _ints(m["divisions"])
        if "lengths" in m:
            kw["lengths"] = _floats(m["lengths"])
    if cp.has_section("time"):
        t = cp["time"]
        if "T" in t:
            kw["T"] = float(t["T"])
        if "n_steps" in t:
            kw["n_steps"] = int(t["n_steps"])
    if cp.has_section("parameters") and "bounds" in cp["parameters"]:
        kw["bounds"] = _bounds(cp["parameters"]["bounds"])
    for key, conv in (("seed", int), ("n_mu_train", int), ("n_mu_mdeim", int), ("n_on", int), ("out", str)):
        if key in run:
            kw[key] = conv(run[key].strip())
    if "eps" in run:
        kw["eps"] = _floats(run["eps"])
    if "methods" in run:
        kw["methods"] = parse_methods(run["methods"])
    try:
        return RunConfig(**kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def parse_methods(text: str) -> tuple:
    """``"ST, FUN-STRB"`` -> ``("ST", "FUN")`` (the ``-STRB`` suffix is optional)."""
    out = []
    for item in text.replace(";", ",").split(","):
        item = item.strip().upper()
        if item.endswith("-STRB"):
            item = item[:-5]
        if item:
            out.append(item)
    return tuple(out)


# -- parameter sampling ----------------------------------------------------------------------------


def _generator(seed: int, stream: int) -> np.random.Generator:
    # Philox4x64 keyed by (seed, stream): counter-based, reproducible in any language
    return np.random.Generator(np.random.Philox(key=[int(seed) & (2 ** 64 - 1), stream]))


def sample_parameters(bounds, N: int, seed: int, stream: int = 0) -> np.ndarray:
    """``N`` i.i.d. uniform points of the box ``bounds`` (``p x 2``).

    Each coordinate is ``low + (high - low) * u`` with ``u`` the next double of a
    Philox4x64-10 stream keyed by ``(seed, stream)``, drawn row by row.
    """
    b = np.atleast_2d(np.asarray(bounds, dtype=float))
    if N < 1:
        raise ConfigError("need at least one parameter")
    if b.ndim != 2 or b.shape[1] != 2 or b.shape[0] == 0 or np.any(b[:, 0] > b[:, 1]):
        raise ConfigError("bounds must be a nonempty list of (low, high) with low <= high")
    u = _generator(seed, stream).random((N, b.shape[0]))
    return b[:, 0] + (b[:, 1] - b[:, 0]) * u


def sample_disjoint(bounds, N: int, seed: int, exclude, tol: float = 1e-12, max_draws: int = 1000) -> np.ndarray:
    """Test parameters with no point within relative l-infinity distance ``tol`` of ``exclude``."""
    exclude = np.atleast_2d(np.asarray(exclude, dtype=float))
    gen = _generator(seed, 1)
    b = np.atleast_2d(np.asarray(bounds, dtype=float))
    out = []
    draws = 0
    while len(out) < N:
        if draws >= max_draws * N:
            raise ConfigError("could not draw disjoint test parameters")
        draws += 1
        mu = b[:, 0] + (b[:, 1] - b[:, 0]) * gen.random(b.shape[0])
        if exclude.size and is_near(mu, exclude, tol):
            continue
        out.append(mu)
    return np.array(out)


def is_near(mu, others, tol: float = 1e-12) -> bool:
    scale = np.maximum(np.maximum(np.abs(others), np.abs(mu)), 1e-300)
    return bool(np.any(np.max(np.abs(others - mu) / scale, axis=1) < tol))
