"""Gaussian priors on a 1-D interval via Matérn kernels and their discrete
Karhunen-Loève decomposition.

A field is represented by its KL coefficients ``u_j = <u, e_j>``; grid values
are synthesized on demand as ``sum_j u_j e_j(t_k)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.special import gamma, kv


@dataclass(frozen=True)
class Grid:
    """Ordered grid points with positive quadrature weights."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        points = np.asarray(self.points, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if points.ndim != 1 or points.size < 2:
            raise ValueError("grid needs at least two points")
        if weights.shape != points.shape:
            raise ValueError("weights must match points in length")
        if not np.all(np.diff(points) > 0):
            raise ValueError("grid points must be strictly increasing")
        if not np.all(weights > 0):
            raise ValueError("quadrature weights must be positive")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def uniform(cls, n: int, a: float = 0.0, b: float = 1.0) -> "Grid":
        """Uniform grid on [a, b] with trapezoidal weights (half-weight ends)."""
        if n < 2:
            raise ValueError("grid needs at least two points")
        points = np.linspace(a, b, n)
        weights = np.full(n, (b - a) / (n - 1))
        weights[[0, -1]] *= 0.5
        return cls(points, weights)

    @property
    def size(self) -> int:
        return self.points.size

    def inner(self, f, g) -> float:
        return float(np.sum(self.weights * f * g))

    def norm(self, f) -> float:
        return math.sqrt(self.inner(f, f))


@dataclass(frozen=True)
class MaternParams:
    sigma: float = 1.0
    nu: float = 5.0
    ell: float = 1.0

    def __post_init__(self):
        for name in ("sigma", "nu", "ell"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"Matern parameter {name} must be positive and finite, got {value!r}")


def matern_kernel(t1, t2, p: MaternParams):
    """Matérn covariance between ``t1`` and ``t2`` (scalars or broadcastable arrays).

    Zero distance is handled as its analytic limit ``sigma**2``.
    """
    t1 = np.asarray(t1, dtype=float)
    t2 = np.asarray(t2, dtype=float)
    if not (np.all(np.isfinite(t1)) and np.all(np.isfinite(t2))):
        raise ValueError("kernel arguments must be finite")
    d = np.abs(t1 - t2)
    scaled = math.sqrt(2.0 * p.nu) * d / p.ell
    out = np.full(scaled.shape, float(p.sigma) ** 2)
    pos = scaled > 0
    if np.any(pos):
        z = scaled[pos]
        with np.errstate(over="ignore", under="ignore", invalid="ignore"):
            vals = p.sigma**2 * 2.0 ** (1.0 - p.nu) / gamma(p.nu) * z**p.nu * kv(p.nu, z)
        # kv underflows to 0 for huge z, where the correlation is 0 anyway
        out[pos] = np.where(np.isfinite(vals), vals, 0.0)
    if out.ndim == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class FieldState:
    """One unknown function as a KL coefficient vector, with an optional cached potential."""

    coeffs: np.ndarray
    phi: Optional[float] = None

    def __post_init__(self):
        coeffs = np.asarray(self.coeffs, dtype=float)
        if not np.all(np.isfinite(coeffs)):
            raise ValueError("field coefficients must be finite")
        object.__setattr__(self, "coeffs", coeffs)

    def with_phi(self, phi: float) -> "FieldState":
        return FieldState(self.coeffs, phi)


@dataclass(frozen=True)
class KlBasis:
    """Retained KL eigenpairs of a discretized covariance operator.

    ``modes[:, j]`` is the eigenfunction ``e_j`` on the grid, orthonormal
    under the grid quadrature; ``alphas`` are the matching eigenvalues in
    descending order.
    """

    grid: Grid
    alphas: np.ndarray
    modes: np.ndarray
    sqrt_alphas: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        alphas = np.asarray(self.alphas, dtype=float)
        modes = np.asarray(self.modes, dtype=float)
        if modes.shape != (self.grid.size, alphas.size):
            raise ValueError(f"modes must have shape {(self.grid.size, alphas.size)}, got {modes.shape}")
        if alphas.size > self.grid.size:
            raise ValueError("cannot retain more modes than grid points")
        if np.any(alphas < 0) or np.any(np.diff(alphas) > 0):
            raise ValueError("alphas must be nonnegative and descending")
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "modes", modes)
        object.__setattr__(self, "sqrt_alphas", np.sqrt(alphas))

    @property
    def M(self) -> int:
        return self.alphas.size

    def synthesize(self, coeffs) -> np.ndarray:
        """Grid values from coefficients; accepts one vector or a (n_samples, M) stack."""
        coeffs = np.asarray(coeffs, dtype=float)
        return coeffs @ self.modes.T

    def project(self, grid_values) -> np.ndarray:
        return project(self, grid_values)

    def field_norm(self, coeffs) -> float:
        """Quadrature L2 norm of the synthesized field."""
        return self.grid.norm(self.synthesize(coeffs))


def build_kl_basis_from_matrix(grid: Grid, kernel_matrix, M: Optional[int] = None) -> KlBasis:
    """KL decomposition of an arbitrary symmetric kernel matrix on ``grid``.

    Solves the symmetric problem ``W^1/2 K W^1/2 v = alpha v`` and rescales
    ``e = W^-1/2 v`` so the modes are orthonormal under the quadrature.
    """
    n = grid.size
    M = n if M is None else int(M)
    if not 1 <= M <= n:
        raise ValueError(f"M must be in [1, {n}], got {M}")
    K = np.asarray(kernel_matrix, dtype=float)
    if K.shape != (n, n):
        raise ValueError(f"kernel matrix must be {n}x{n}")
    if not np.all(np.isfinite(K)):
        raise ValueError("kernel matrix has non-finite entries")
    sw = np.sqrt(grid.weights)
    A = sw[:, None] * K * sw[None, :]
    A = 0.5 * (A + A.T)
    vals, vecs = np.linalg.eigh(A)
    order = np.argsort(vals)[::-1][:M]
    alphas = np.clip(vals[order], 0.0, None)
    vecs = vecs[:, order]
    # deterministic sign: largest-magnitude entry of each mode positive
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(M)])
    signs[signs == 0] = 1.0
    modes = (vecs * signs) / sw[:, None]
    return KlBasis(grid, alphas, modes)


def build_kl_basis(grid: Grid, p: MaternParams, M: Optional[int] = None,
                   kernel: Optional[Callable] = None) -> KlBasis:
    """Discrete KL basis of the Matérn prior (or of ``kernel(t1, t2)`` if given)."""
    t = grid.points
    if kernel is None:
        K = matern_kernel(t[:, None], t[None, :], p)
    else:
        K = np.asarray(kernel(t[:, None], t[None, :]), dtype=float)
    return build_kl_basis_from_matrix(grid, K, M)


def select_J(alphas, rho: float) -> int:
    """Smallest J whose leading eigenvalues carry more than ``rho`` of the total mass."""
    if not 0.0 < rho < 1.0:
        raise ValueError(f"rho must lie in (0, 1), got {rho}")
    alphas = np.asarray(alphas, dtype=float)
    if alphas.size == 0 or np.any(alphas < 0) or not np.any(alphas > 0):
        raise ValueError("alphas must be nonempty, nonnegative and not all zero")
    frac = np.cumsum(alphas) / alphas.sum()
    above = np.nonzero(frac > rho)[0]
    if above.size == 0:
        return int(alphas.size)
    return int(above[0]) + 1


def prior_sample(basis: KlBasis, rng: np.random.Generator) -> FieldState:
    """Draw ``u = sum_j sqrt(alpha_j) xi_j e_j``, returned as coefficients."""
    xi = rng.standard_normal(basis.M)
    return FieldState(basis.sqrt_alphas * xi)


def project(basis: KlBasis, grid_values) -> np.ndarray:
    """Coefficients ``<f, e_j>`` under the grid quadrature."""
    values = np.asarray(grid_values, dtype=float)
    if values.shape[-1] != basis.grid.size:
        raise ValueError(f"expected {basis.grid.size} grid values, got {values.shape[-1]}")
    return (values * basis.grid.weights) @ basis.modes


def save_basis(basis: KlBasis, directory) -> None:
    """Write grid/weights and eigenvalues as CSV, modes as ``.npy``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "basis_grid.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "weight"])
        for t, wt in zip(basis.grid.points, basis.grid.weights):
            w.writerow([repr(float(t)), repr(float(wt))])
    with open(directory / "basis_alphas.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["j", "alpha"])
        for j, a in enumerate(basis.alphas, start=1):
            w.writerow([j, repr(float(a))])
    np.save(directory / "basis_modes.npy", basis.modes)


def load_basis(directory) -> KlBasis:
    directory = Path(directory)
    grid_tab = np.loadtxt(directory / "basis_grid.csv", delimiter=",", skiprows=1, ndmin=2)
    alphas = np.loadtxt(directory / "basis_alphas.csv", delimiter=",", skiprows=1, ndmin=2)[:, 1]
    modes = np.load(directory / "basis_modes.npy")
    return KlBasis(Grid(grid_tab[:, 0], grid_tab[:, 1]), alphas, modes)
