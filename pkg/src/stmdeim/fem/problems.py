"""Parametric data of the two benchmark problems and their desk-scale meshes.

Field callables share the signature ``fn(x, t, mu)`` with ``x`` an ``(n, 3)``
array of points; they return ``(n,)`` (scalar) or ``(n, 3)`` (vector) arrays.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .mesh import Mesh, build_box_mesh

Field = Callable[[np.ndarray, float, np.ndarray], np.ndarray]


def _zero(x, t, mu):
    return np.zeros(len(x))


def _one(x, t, mu):
    return np.ones(len(x))


@dataclass(frozen=True, eq=False)
class ParametricData:
    alpha: Field
    f: Field
    g: Field
    h: Field
    u0: Field
    bounds: np.ndarray
    T: float
    n_steps: int
    vector: bool = False
    name: str = "custom"
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        b = np.atleast_2d(np.asarray(self.bounds, dtype=float))
        if b.shape[1] != 2 or np.any(b[:, 0] > b[:, 1]):
            raise ValueError("bounds must be (p, 2) with low <= high")
        if self.T <= 0 or self.n_steps < 1:
            raise ValueError("need T > 0 and at least one time step")
        object.__setattr__(self, "bounds", b)

    @property
    def delta(self) -> float:
        return self.T / self.n_steps

    @property
    def times(self) -> np.ndarray:
        """``t_1, ..., t_{N_t}``."""
        return self.delta * np.arange(1, self.n_steps + 1)

    @property
    def n_params(self) -> int:
        return self.bounds.shape[0]

    def check_mu(self, mu, strict: bool = False) -> np.ndarray:
        mu = np.asarray(mu, dtype=float)
        if mu.shape != (self.n_params,):
            raise ValueError(f"parameter must have {self.n_params} entries")
        outside = np.any(mu < self.bounds[:, 0]) or np.any(mu > self.bounds[:, 1])
        if outside:
            msg = f"parameter {mu.tolist()} lies outside the parameter box"
            if strict:
                raise ValueError(msg)
            warnings.warn(msg, stacklevel=2)
        return mu


# -- heat conduction in a thin plate ----------------------------------------------------------


def heat_data(T: float = 0.3, n_steps: int = 20) -> ParametricData:
    """Nonaffine heat problem on ``[1, 10]^3``.

    ``alpha = exp(x1 (sin t + cos t) / sum(mu))``, ``f = 1``,
    ``g = mu1 exp(-x1 / mu2) |sin(pi t / (mu3 T))|``, ``h = |cos(pi t / (mu3 T))|``,
    ``u0 = 0``.
    """

    def alpha(x, t, mu):
        return np.exp(x[:, 0] * (np.sin(t) + np.cos(t)) / np.sum(mu))

    def g(x, t, mu):
        return mu[0] * np.exp(-x[:, 0] / mu[1]) * np.abs(np.sin(np.pi * t / (mu[2] * T)))

    def h(x, t, mu):
        return np.full(len(x), np.abs(np.cos(np.pi * t / (mu[2] * T))))

    return ParametricData(alpha=alpha, f=_one, g=g, h=h, u0=_zero, bounds=[[1.0, 10.0]] * 3,
                          T=T, n_steps=n_steps, name="heat")


HEAT_TAGS = {"x0": "dirichlet", "x1": "neumann_zero", "y0": "neumann", "y1": "neumann",
             "z0": "neumann", "z1": "neumann"}


def heat_mesh(divisions=(24, 8, 4), lengths=(4.0, 1.5, 0.2)) -> Mesh:
    return build_box_mesh(lengths, divisions, HEAT_TAGS)


# -- unsteady Stokes in a channel -------------------------------------------------------------


def stokes_data(T: float = 0.15, n_steps: int = 16, inlet_width: float = 1.5) -> ParametricData:
    """Stokes channel with the heat-test viscosity and a pulsating parabolic inflow.

    Inlet profile ``-mu1 x2 (x2 - W) |1 - cos(pi t / T) + sin(pi t / (mu3 T)) / mu2|``
    directed into the domain (``+x``).
    """

    def alpha(x, t, mu):
        return np.exp(x[:, 0] * (np.sin(t) + np.cos(t)) / np.sum(mu))

    def g(x, t, mu):
        amp = np.abs(1.0 - np.cos(np.pi * t / T) + np.sin(np.pi * t / (mu[2] * T)) / mu[1])
        out = np.zeros((len(x), 3))
        out[:, 0] = -mu[0] * x[:, 1] * (x[:, 1] - inlet_width) * amp
        return out

    def vzero(x, t, mu):
        return np.zeros((len(x), 3))

    return ParametricData(alpha=alpha, f=vzero, g=g, h=vzero, u0=vzero, bounds=[[1.0, 10.0]] * 3,
                          T=T, n_steps=n_steps, vector=True, name="stokes",
                          extras={"inlet_width": inlet_width})


STOKES_TAGS = {"x0": "dirichlet", "x1": "neumann_zero", "y0": "dirichlet_zero", "y1": "dirichlet_zero",
               "z0": "dirichlet_nopen", "z1": "dirichlet_nopen"}


def stokes_mesh(divisions=(12, 4, 2), lengths=(4.0, 1.5, 0.2)) -> Mesh:
    return build_box_mesh(lengths, divisions, STOKES_TAGS)
