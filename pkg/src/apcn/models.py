"""Forward models, likelihood potentials and synthetic data."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .heat import default_g, default_h0, default_h1, solve_heat
from .kl import FieldState, KlBasis


def _coeffs(u) -> np.ndarray:
    return u.coeffs if isinstance(u, FieldState) else np.asarray(u, dtype=float)


def observation_times(n_intervals: int, T: float = 1.0, include_start: bool = True) -> np.ndarray:
    """Instants ``k T / n_intervals``; ``k`` starts at 0 or 1."""
    k = np.arange(0 if include_start else 1, n_intervals + 1)
    return k * (T / n_intervals)


@dataclass(frozen=True)
class ObservationSet:
    times: np.ndarray
    values: np.ndarray
    noise_sigma: float

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if times.shape != values.shape or times.ndim != 1:
            raise ValueError("times and values must be 1-D and of equal length")
        if np.any(np.diff(times) < 0):
            raise ValueError("observation times must be nondecreasing")
        if not self.noise_sigma >= 0:
            raise ValueError("noise_sigma must be nonnegative")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.times.size


def write_observations(obs: ObservationSet, path, sidecar: Optional[dict] = None) -> None:
    """CSV (time, value) plus a JSON sidecar holding sigma and provenance."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "value"])
        for t, y in zip(obs.times, obs.values):
            w.writerow([repr(float(t)), repr(float(y))])
    meta = {"noise_sigma": obs.noise_sigma}
    meta.update(sidecar or {})
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_observations(path) -> ObservationSet:
    path = Path(path)
    tab = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    meta = json.loads(path.with_suffix(".json").read_text())
    return ObservationSet(tab[:, 0], tab[:, 1], float(meta["noise_sigma"]))


class ForwardModel:
    """Maps KL coefficients of the unknown to predicted observations."""

    basis: Optional[KlBasis] = None
    obs_times: Optional[np.ndarray] = None

    def evaluate(self, u) -> np.ndarray:
        raise NotImplementedError

    def describe(self) -> dict:
        return {"model": type(self).__name__}


def ode_forward(u, basis: KlBasis, obs_times) -> np.ndarray:
    """Solution of ``x' = -u(t) x, x(0) = 1`` at ``obs_times``.

    Uses ``x(t) = exp(-int_0^t u)`` with a cumulative trapezoid on the basis
    grid, linearly interpolated to the observation instants.
    """
    obs_times = np.asarray(obs_times, dtype=float)
    t = basis.grid.points
    if np.any(obs_times < t[0] - 1e-12) or np.any(obs_times > t[-1] + 1e-12):
        raise ValueError("observation times outside the grid")
    values = basis.synthesize(_coeffs(u))
    integral = np.concatenate(([0.0], np.cumsum(0.5 * (values[1:] + values[:-1]) * np.diff(t))))
    return np.exp(-np.interp(obs_times, t, integral))


@dataclass(frozen=True)
class HeatSolverConfig:
    nx: int = 101
    nt: int = 401
    length: float = 1.0
    T: float = 1.0
    sensor: str = "left"
    convention: str = "outward"

    def __post_init__(self):
        if self.nx < 3 or self.nt < 3:
            raise ValueError("nx and nt must be at least 3")
        if self.sensor not in ("left", "right", "both"):
            raise ValueError(f"sensor must be left, right or both, got {self.sensor!r}")
        if self.convention not in ("outward", "literal"):
            raise ValueError(f"convention must be outward or literal, got {self.convention!r}")


def heat_forward(rho, basis: KlBasis, solver_config: HeatSolverConfig, obs_times,
                 g=default_g, h0=default_h0, h1=default_h1) -> np.ndarray:
    """Boundary temperature at ``obs_times`` for the Robin coefficient ``rho(t)``.

    ``rho`` lives on the basis grid over [0, T]; it is interpolated linearly to
    the solver time levels. With ``sensor="both"`` the two traces are
    interleaved (left, right) per observation time.
    """
    cfg = solver_config
    obs_times = np.asarray(obs_times, dtype=float)
    levels = np.linspace(0.0, cfg.T, cfg.nt)
    rho_levels = np.interp(levels, basis.grid.points, basis.synthesize(_coeffs(rho)))
    U = solve_heat(rho_levels, cfg.nx, cfg.length, cfg.T, g, h0, h1, cfg.convention)
    left = np.interp(obs_times, levels, U[:, 0])
    if cfg.sensor == "left":
        return left
    right = np.interp(obs_times, levels, U[:, -1])
    if cfg.sensor == "right":
        return right
    return np.column_stack((left, right)).ravel()


def linear_gaussian_forward(u, design) -> np.ndarray:
    design = np.asarray(design, dtype=float)
    c = _coeffs(u)
    if design.ndim != 2 or design.shape[1] != c.size:
        raise ValueError(f"design has {design.shape[-1]} columns but the state has {c.size} coefficients")
    return design @ c


@dataclass
class OdeModel(ForwardModel):
    basis: KlBasis
    obs_times: np.ndarray

    def evaluate(self, u) -> np.ndarray:
        return ode_forward(u, self.basis, self.obs_times)

    def describe(self) -> dict:
        return {"model": "ode", "x0": 1.0, "quadrature": "cumulative trapezoid"}


@dataclass
class HeatModel(ForwardModel):
    basis: KlBasis
    obs_times: np.ndarray
    solver: HeatSolverConfig = field(default_factory=HeatSolverConfig)

    def evaluate(self, u) -> np.ndarray:
        return heat_forward(u, self.basis, self.solver, self.obs_times)

    @property
    def data_times(self) -> np.ndarray:
        if self.solver.sensor == "both":
            return np.repeat(self.obs_times, 2)
        return self.obs_times

    def describe(self) -> dict:
        return {"model": "robin", "nx": self.solver.nx, "nt": self.solver.nt,
                "sensor": self.solver.sensor, "convention": self.solver.convention}


@dataclass
class LinearGaussianModel(ForwardModel):
    design: np.ndarray
    basis: Optional[KlBasis] = None
    obs_times: Optional[np.ndarray] = None

    def __post_init__(self):
        self.design = np.asarray(self.design, dtype=float)
        if self.obs_times is None:
            self.obs_times = np.arange(self.design.shape[0], dtype=float)

    def evaluate(self, u) -> np.ndarray:
        return linear_gaussian_forward(u, self.design)

    def describe(self) -> dict:
        return {"model": "linear-gaussian", "n_obs": int(self.design.shape[0])}


def analytic_posterior(design, obs: ObservationSet, alphas):
    """Conjugate update of the prior ``N(0, diag(alphas))`` under ``y = A u + noise``."""
    A = np.asarray(design, dtype=float)
    alphas = np.asarray(alphas, dtype=float)
    if A.shape != (len(obs), alphas.size):
        raise ValueError("design shape does not match observations and prior")
    if np.any(alphas <= 0):
        raise np.linalg.LinAlgError("prior precision is singular (zero eigenvalue)")
    s2 = obs.noise_sigma**2
    precision = np.diag(1.0 / alphas) + A.T @ A / s2
    cov = np.linalg.inv(precision)
    cov = 0.5 * (cov + cov.T)
    mean = cov @ (A.T @ obs.values) / s2
    return mean, cov


class Potential:
    """Gaussian misfit ``sum (pred - y)^2 / (2 sigma^2)``, optionally +inf outside ``||u|| > R``."""

    def __init__(self, model: ForwardModel, obs: ObservationSet, radius: Optional[float] = None):
        if radius is not None and not radius > 0:
            raise ValueError("radius must be positive")
        if not obs.noise_sigma > 0:
            raise ValueError("a likelihood needs a positive noise_sigma")
        self.model = model
        self.obs = obs
        self.radius = radius
        self._scale = 0.5 / obs.noise_sigma**2

    def __call__(self, u) -> float:
        c = _coeffs(u)
        if self.radius is not None and math.isfinite(self.radius):
            if self.model.basis is None:
                norm = float(np.linalg.norm(c))
            else:
                norm = self.model.basis.field_norm(c)
            if norm > self.radius:
                return math.inf
        r = self.model.evaluate(c) - self.obs.values
        return float(self._scale * (r @ r))


def make_phi(model: ForwardModel, obs: ObservationSet, radius: Optional[float] = None) -> Potential:
    return Potential(model, obs, radius)


class ZeroPotential:
    """Flat likelihood: the posterior is the prior."""

    radius = None

    def __call__(self, u) -> float:
        return 0.0


def generate_synthetic_data(model: ForwardModel, truth, noise_sigma: float, seed,
                            obs_times=None) -> ObservationSet:
    """``evaluate(truth)`` plus i.i.d. ``N(0, noise_sigma^2)`` noise.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    if obs_times is not None:
        model.obs_times = np.asarray(obs_times, dtype=float)
    pred = model.evaluate(truth)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    values = pred + noise_sigma * rng.standard_normal(pred.size) if noise_sigma > 0 else pred.copy()
    times = getattr(model, "data_times", model.obs_times)
    if times is None or len(times) != pred.size:
        times = np.arange(pred.size, dtype=float)
    return ObservationSet(times, values, noise_sigma)
