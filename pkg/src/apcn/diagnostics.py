"""Chain post-processing: ACF, integrated autocorrelation time, ESS, bands."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .kl import KlBasis
from .samplers import Chain


class DegenerateSeriesWarning(UserWarning):
    """A series had zero variance; its ACF/ESS are conventional values."""


def _acf_columns(X: np.ndarray, max_lag: int):
    """Biased autocorrelation of each column of ``X`` for lags 0..max_lag (FFT)."""
    n = X.shape[0]
    Xc = X - X.mean(axis=0)
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(Xc, n=size, axis=0)
    acov = np.fft.irfft(f * np.conj(f), n=size, axis=0)[: max_lag + 1] / n
    var = acov[0].copy()
    out = np.ones_like(acov)
    ok = var > 0
    out[:, ok] = acov[:, ok] / var[ok]
    out[0, ok] = 1.0
    return out, ~ok


def acf(series, max_lag: int) -> np.ndarray:
    """``gamma(k) / gamma(0)`` with the 1/N autocovariance, for k = 0..max_lag."""
    x = np.asarray(series, dtype=float)
    if x.ndim != 1 or not 1 <= max_lag < x.size:
        raise ValueError("need a 1-D series longer than max_lag >= 1")
    out, degenerate = _acf_columns(x[:, None], max_lag)
    if degenerate[0]:
        warnings.warn("constant series: ACF set to 1 at every lag", DegenerateSeriesWarning, stacklevel=2)
    return out[:, 0]


def _tau_ips(rho: np.ndarray) -> float:
    """Sum of autocorrelations at lags >= 1, truncated by the initial positive sequence."""
    m = rho.size // 2
    pairs = rho[: 2 * m : 2] + rho[1 : 2 * m : 2]
    nonpos = np.nonzero(pairs <= 0)[0]
    stop = nonpos[0] if nonpos.size else m
    return float(pairs[:stop].sum()) - 1.0


def _ess_from_acf(rho: np.ndarray, n: int) -> float:
    tau = _tau_ips(rho)
    denom = 1.0 + 2.0 * tau
    if denom <= 0:
        return float(n)
    return float(min(max(n / denom, np.finfo(float).tiny), n))


def integrated_time(series) -> float:
    """Integrated autocorrelation time ``tau`` in ``ESS = N / (1 + 2 tau)``."""
    x = np.asarray(series, dtype=float)
    rho, degenerate = _acf_columns(x[:, None], x.size - 1)
    if degenerate[0]:
        return math.inf
    return _tau_ips(rho[:, 0])


def ess(series) -> float:
    """Effective sample size ``N / (1 + 2 tau)``, clipped to (0, N]."""
    x = np.asarray(series, dtype=float)
    if x.ndim != 1 or x.size < 100:
        raise ValueError("ESS needs a 1-D series of length >= 100")
    rho, degenerate = _acf_columns(x[:, None], x.size - 1)
    if degenerate[0]:
        warnings.warn("constant series: ESS reported as 1", DegenerateSeriesWarning, stacklevel=2)
        return 1.0
    return _ess_from_acf(rho[:, 0], x.size)


def ess_columns(X, chunk: int = 32) -> np.ndarray:
    """ESS of every column of a (n_samples, n_series) array."""
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    out = np.empty(p)
    for lo in range(0, p, chunk):
        rho, degenerate = _acf_columns(X[:, lo : lo + chunk], n - 1)
        for i in range(rho.shape[1]):
            out[lo + i] = 1.0 if degenerate[i] else _ess_from_acf(rho[:, i], n)
    return out


def acf_columns(X, max_lag: int, chunk: int = 32) -> np.ndarray:
    """ACF up to ``max_lag`` of every column; shape (n_series, max_lag + 1)."""
    X = np.asarray(X, dtype=float)
    if not 1 <= max_lag < X.shape[0]:
        raise ValueError("max_lag must be in [1, n_samples)")
    parts = [_acf_columns(X[:, lo : lo + chunk], max_lag)[0].T for lo in range(0, X.shape[1], chunk)]
    return np.vstack(parts)


@dataclass
class ChainSummary:
    acceptance_rate: float
    mean_field: np.ndarray
    median_field: np.ndarray
    band_lo: np.ndarray
    band_hi: np.ndarray
    ess_field: np.ndarray
    acf_curves: np.ndarray
    lags: np.ndarray
    n_samples: int
    lambda_steps: Optional[np.ndarray] = None
    lambda_traj: Optional[np.ndarray] = None


def summarize(chain: Chain, basis: KlBasis, burn_in: int = 0,
              quantiles: Sequence[float] = (0.025, 0.975), max_lag: int = 1000) -> ChainSummary:
    """Pointwise posterior summaries of the stored states after ``burn_in`` of them.

    ``burn_in`` counts stored states (not iterations). ACF curves are kept up
    to ``min(max_lag, n - 1)``.
    """
    if not 0 <= burn_in < len(chain):
        raise ValueError(f"burn_in must be in [0, {len(chain)}), got {burn_in}")
    coeffs = chain.samples[burn_in:]
    values = basis.synthesize(coeffs)
    n = values.shape[0]
    lo, hi = np.quantile(values, list(quantiles), axis=0)
    lag = min(max_lag, n - 1)
    acc = chain.accepted[burn_in:]
    if burn_in == 0:
        acc = acc[1:]  # the initial state is not a proposal outcome
    rate = float(acc.mean()) if acc.size else 1.0
    return ChainSummary(
        acceptance_rate=rate,
        mean_field=values.mean(axis=0),
        median_field=np.median(values, axis=0),
        band_lo=lo,
        band_hi=hi,
        ess_field=ess_columns(values) if n >= 2 else np.ones(values.shape[1]),
        acf_curves=acf_columns(values, lag) if lag >= 1 else np.ones((values.shape[1], 1)),
        lags=np.arange(lag + 1),
        n_samples=n,
        lambda_steps=chain.lambda_steps,
        lambda_traj=chain.lambda_traj,
    )


def adaptation_decay(lambda_traj, steps=None, n_min: float = 1e3) -> float:
    """Log-log slope of ``max_j |lambda_j^{n+1} - lambda_j^n|`` against ``n``.

    Only steps ``n >= n_min`` with nonzero change enter the fit. Returns
    ``-inf`` when the trajectory never changes (already converged).
    """
    L = np.asarray(lambda_traj, dtype=float)
    if L.ndim == 1:
        L = L[:, None]
    steps = np.arange(L.shape[0]) if steps is None else np.asarray(steps, dtype=float)
    diffs = np.max(np.abs(np.diff(L, axis=0)), axis=1)
    n = steps[:-1]
    window = n >= n_min
    if window.sum() < 2 or n[window][-1] < 10 * max(n_min, n[window][0]):
        raise ValueError("trajectory must span at least one decade of n above n_min")
    d, n = diffs[window], n[window]
    if not np.any(d > 0):
        return -math.inf
    keep = d > 0
    slope, _ = np.polyfit(np.log(n[keep]), np.log(d[keep]), 1)
    return float(slope)
