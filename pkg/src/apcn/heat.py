"""Crank-Nicolson solver for u_t = u_xx on [0, L] with time-dependent Robin ends.

Boundary conditions, with ``n`` the outward normal at each end::

    du/dn(0, t) + rho(t) u(0, t) = h0(t)      (du/dn = -u_x at x = 0)
    du/dn(L, t) + rho(t) u(L, t) = h1(t)      (du/dn = +u_x at x = L)

Both ends use a ghost node and the central flux difference, so the scheme is
second order in space and time. ``convention="literal"`` uses -u_x at x = L
instead.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _thomas(lower, diag, upper, rhs, out, cp, dp):
    n = diag.size
    cp[0] = upper[0] / diag[0]
    dp[0] = rhs[0] / diag[0]
    for i in range(1, n):
        m = diag[i] - lower[i] * cp[i - 1]
        if m == 0.0:
            return False
        if i < n - 1:
            cp[i] = upper[i] / m
        dp[i] = (rhs[i] - lower[i] * dp[i - 1]) / m
    out[n - 1] = dp[n - 1]
    for i in range(n - 2, -1, -1):
        out[i] = dp[i] - cp[i] * out[i + 1]
    return True


@njit(cache=True)
def _cn_robin(g, rho, h0, h1, dx, dt, right_sign):
    """March all time levels; returns the (nt, nx) solution history or an empty array on failure.

    Semi-discrete system ``du/dt = A(t) u + b(t)`` where the boundary rows are
    ``(2 u_1 - (2 + 2 dx rho) u_0) / dx^2 + 2 h0 / dx`` and the mirror image at
    the right end (``right_sign`` = +1 outward, -1 literal).
    """
    nt = rho.size
    nx = g.size
    U = np.empty((nt, nx))
    U[0, :] = g
    r = dt / dx**2
    lower = np.empty(nx)
    diag = np.empty(nx)
    upper = np.empty(nx)
    rhs = np.empty(nx)
    cp = np.empty(nx)
    dp = np.empty(nx)
    out = np.empty(nx)
    for k in range(nt - 1):
        u = U[k]
        # explicit half: (I + dt/2 A^k) u + dt/2 b^k
        d0 = 2.0 + 2.0 * dx * rho[k]
        dN = 2.0 + right_sign * 2.0 * dx * rho[k]
        rhs[0] = u[0] + 0.5 * r * (2.0 * u[1] - d0 * u[0]) + dt * h0[k] / dx
        for i in range(1, nx - 1):
            rhs[i] = u[i] + 0.5 * r * (u[i - 1] - 2.0 * u[i] + u[i + 1])
        rhs[nx - 1] = (u[nx - 1] + 0.5 * r * (2.0 * u[nx - 2] - dN * u[nx - 1])
                       + right_sign * dt * h1[k] / dx)
        # implicit half: I - dt/2 A^{k+1}
        d0 = 2.0 + 2.0 * dx * rho[k + 1]
        dN = 2.0 + right_sign * 2.0 * dx * rho[k + 1]
        rhs[0] += dt * h0[k + 1] / dx
        rhs[nx - 1] += right_sign * dt * h1[k + 1] / dx
        for i in range(nx):
            lower[i] = -0.5 * r
            upper[i] = -0.5 * r
            diag[i] = 1.0 + r
        diag[0] = 1.0 + 0.5 * r * d0
        upper[0] = -r
        diag[nx - 1] = 1.0 + 0.5 * r * dN
        lower[nx - 1] = -r
        if not _thomas(lower, diag, upper, rhs, out, cp, dp):
            return np.empty((0, 0))
        for i in range(nx):
            U[k + 1, i] = out[i]
    return U


def default_g(x):
    return x**2 + 1.0


def default_h0(t):
    return t * (2.0 * t + 1.0)


def default_h1(t):
    return 2.0 + t * (2.0 * t + 2.0)


def solve_heat(rho_levels, nx: int, length: float = 1.0, T: float = 1.0, g=default_g, h0=default_h0,
               h1=default_h1, convention: str = "outward") -> np.ndarray:
    """Solution history on the ``(nt, nx)`` space-time grid, ``nt = len(rho_levels)``.

    ``rho_levels`` are the Robin coefficients at the time levels ``linspace(0, T, nt)``.
    """
    rho_levels = np.ascontiguousarray(rho_levels, dtype=float)
    nt = rho_levels.size
    if nx < 3 or nt < 3:
        raise ValueError("need nx, nt >= 3")
    if not np.all(np.isfinite(rho_levels)):
        raise ValueError("Robin coefficient must be finite")
    if convention not in ("outward", "literal"):
        raise ValueError(f"unknown Robin sign convention {convention!r}")
    x = np.linspace(0.0, length, nx)
    t = np.linspace(0.0, T, nt)
    gx = np.ascontiguousarray(np.broadcast_to(g(x), x.shape), dtype=float)
    h0t = np.ascontiguousarray(np.broadcast_to(h0(t), t.shape), dtype=float)
    h1t = np.ascontiguousarray(np.broadcast_to(h1(t), t.shape), dtype=float)
    sign = 1.0 if convention == "outward" else -1.0
    U = _cn_robin(gx, rho_levels, h0t, h1t, length / (nx - 1), T / (nt - 1), sign)
    if U.size == 0:
        raise np.linalg.LinAlgError("singular Crank-Nicolson system; Robin coefficient is pathological")
    return U
