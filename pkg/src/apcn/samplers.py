"""Crank-Nicolson family of function-space MCMC samplers in KL coordinates.

Three proposals are provided: plain CN, pCN and the adaptive pCN (ApCN),
whose proposal covariance shares the prior eigenfunctions and adapts its
leading ``J`` eigenvalues to the running posterior variance. All of them
share the acceptance rule ``min(1, exp(phi(u) - phi(v)))``, which never looks
at the proposal operator.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .kl import FieldState, KlBasis, prior_sample, select_J

log = logging.getLogger(__name__)

SAMPLER_KINDS = ("cn", "pcn", "apcn")


class SamplerError(RuntimeError):
    """Raised when a chain cannot continue (bad potential value, model failure)."""


def beta_from_delta(delta: float) -> float:
    if not 0.0 < delta < 2.0 + 1e-15:
        raise ValueError(f"delta must lie in (0, 2), got {delta}")
    return math.sqrt(8.0 * delta) / (2.0 + delta)


@dataclass(frozen=True)
class StepSize:
    beta: float
    delta: Optional[float] = None

    def __post_init__(self):
        if not 0.0 < self.beta <= 1.0:
            raise ValueError(f"beta must lie in (0, 1], got {self.beta}")
        if self.delta is not None and abs(beta_from_delta(self.delta) - self.beta) > 1e-12:
            raise ValueError("beta and delta are inconsistent")

    @classmethod
    def from_delta(cls, delta: float) -> "StepSize":
        return cls(beta_from_delta(delta), delta)


@dataclass(frozen=True)
class AdaptiveState:
    """Running statistics behind the adapted eigenvalues of the proposal operator.

    ``n`` counts absorbed samples. ``xbar`` and ``s`` are the running means and
    raw sums of squares of the leading ``J`` coefficients; ``m2`` holds the
    centred sums of squares (Welford form of the same quantity, kept to avoid
    cancellation in ``s/n - xbar**2``).
    """

    J: int
    n: int
    xbar: np.ndarray
    s: np.ndarray
    m2: np.ndarray
    lambdas: np.ndarray
    eps: float
    alphas_head: np.ndarray

    @classmethod
    def empty(cls, J: int, eps: float, alphas) -> "AdaptiveState":
        head = np.asarray(alphas, dtype=float)[:J].copy()
        zeros = np.zeros(J)
        return cls(J, 0, zeros, zeros.copy(), zeros.copy(), head.copy(), float(eps), head)

    @classmethod
    def frozen(cls, lambdas, alphas) -> "AdaptiveState":
        """A fixed operator: given eigenvalues, capped at the prior ones."""
        lambdas = np.asarray(lambdas, dtype=float)
        J = lambdas.size
        head = np.asarray(alphas, dtype=float)[:J].copy()
        if np.any(lambdas < 0):
            raise ValueError("proposal eigenvalues must be nonnegative")
        zeros = np.zeros(J)
        return cls(J, 0, zeros, zeros.copy(), zeros.copy(), np.minimum(lambdas, head), 0.0, head)


def _lambdas_from(m2, n, eps, alphas_head):
    lam = m2 / n + eps**2
    return np.minimum(lam, alphas_head)


def contraction_factor(beta: float, lam: float, alpha: float) -> float:
    """Mode-wise autoregression coefficient ``sqrt(1 - beta**2 * lam / alpha)``."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    if lam > alpha:
        raise ValueError(f"lambda={lam} exceeds alpha={alpha}")
    if alpha == 0.0:
        return 1.0
    return math.sqrt(1.0 - beta**2 * (lam / alpha))


def cn_substitution_check(delta: float, k: float, alpha: float):
    """Map a CN step ``(delta, K)`` on one mode to the ``(beta, lambda)`` form.

    With ``t = delta*k/(2*alpha)``, the noise term of the CN proposal gives
    ``beta**2 * lambda = 2*delta*k/(1+t)**2``; the returned residual measures
    ``((1-t)/(1+t))**2`` against ``1 - beta**2*lambda/alpha``.
    """
    if not 0.0 < delta <= 2.0:
        raise ValueError(f"delta must lie in (0, 2], got {delta}")
    if k <= 0 or alpha <= 0:
        raise ValueError("k and alpha must be positive")
    beta = beta_from_delta(delta)
    t = delta * k / (2.0 * alpha)
    beta2_lam = 2.0 * delta * k / (1.0 + t) ** 2
    lam = beta2_lam / beta**2
    residual = abs(((1.0 - t) / (1.0 + t)) ** 2 - (1.0 - beta2_lam / alpha))
    return beta, lam, residual


def acceptance_prob(phi_u: float, phi_v: float) -> float:
    """``min(1, exp(phi_u - phi_v))``; an infinite ``phi_v`` is never accepted."""
    if math.isnan(phi_u) or math.isnan(phi_v):
        raise ValueError("potential values must not be NaN")
    if phi_v == math.inf:
        return 0.0
    if phi_u == math.inf:
        return 1.0
    diff = phi_u - phi_v
    if diff >= 0.0:
        return 1.0
    return math.exp(diff)


def pcn_propose(u: FieldState, beta: float, basis: KlBasis, rng: np.random.Generator) -> FieldState:
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    xi = rng.standard_normal(basis.M)
    if beta == 0.0:
        return FieldState(u.coeffs.copy())
    return FieldState(math.sqrt(1.0 - beta**2) * u.coeffs + beta * (basis.sqrt_alphas * xi))


def cn_propose(u: FieldState, delta: float, basis: KlBasis, rng: np.random.Generator) -> FieldState:
    """Plain CN: ``(2C + delta I) v = (2C - delta I) u + sqrt(8 delta) C xi`` solved mode-wise.

    The noise ``C xi`` (``xi`` white) has per-mode standard deviation
    ``alpha_j``, which is what keeps the prior invariant.
    """
    if not 0.0 < delta < 2.0:
        raise ValueError(f"delta must lie in (0, 2), got {delta}")
    xi = rng.standard_normal(basis.M)
    a = basis.alphas
    denom = 2.0 * a + delta
    return FieldState(((2.0 * a - delta) / denom) * u.coeffs
                      + (math.sqrt(8.0 * delta) * a / denom) * xi)


def apcn_coefficients(beta: float, adapt: AdaptiveState, basis: KlBasis):
    """Per-mode (contraction, noise std) of the adaptive proposal."""
    J = adapt.J
    coef = np.full(basis.M, math.sqrt(1.0 - beta**2))
    scale = basis.sqrt_alphas.copy()
    head = basis.alphas[:J]
    ratio = np.divide(adapt.lambdas, head, out=np.zeros(J), where=head > 0)
    inner = 1.0 - beta**2 * ratio
    assert np.all(inner >= 0.0), "adapted eigenvalue exceeds prior eigenvalue"
    coef[:J] = np.sqrt(inner)
    scale[:J] = np.sqrt(adapt.lambdas)
    return coef, scale


def apcn_propose(u: FieldState, beta: float, adapt: AdaptiveState, basis: KlBasis,
                 rng: np.random.Generator) -> FieldState:
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    coef, scale = apcn_coefficients(beta, adapt, basis)
    xi = rng.standard_normal(basis.M)
    return FieldState(coef * u.coeffs + beta * (scale * xi))


def adapt_update(adapt: AdaptiveState, u: FieldState) -> AdaptiveState:
    """Absorb one more sample into the running statistics."""
    x = np.asarray(u.coeffs, dtype=float)[: adapt.J]
    n1 = adapt.n + 1
    if adapt.n == 0:
        xbar = x.copy()
        m2 = np.zeros(adapt.J)
    else:
        xbar = (adapt.n / n1) * adapt.xbar + x / n1
        m2 = adapt.m2 + (x - adapt.xbar) * (x - xbar)
    s = adapt.s + x**2
    lambdas = _lambdas_from(m2, n1, adapt.eps, adapt.alphas_head)
    return replace(adapt, n=n1, xbar=xbar, s=s, m2=m2, lambdas=lambdas)


def adapt_batch(samples, J: int, eps: float, alphas) -> AdaptiveState:
    """Adaptive state computed in one pass from a block of coefficient vectors."""
    X = np.asarray(samples, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[0] == 0:
        raise ValueError("adapt_batch needs at least one sample")
    X = X[:, :J]
    n = X.shape[0]
    xbar = X.mean(axis=0)
    s = np.sum(X**2, axis=0)
    m2 = np.sum((X - xbar) ** 2, axis=0)
    head = np.asarray(alphas, dtype=float)[:J].copy()
    return AdaptiveState(J, n, xbar, s, m2, _lambdas_from(m2, n, eps, head), float(eps), head)


@dataclass
class SamplerConfig:
    """Run parameters for :func:`run_mcmc`.

    ``n_steps`` is the total number of transitions N (the chain holds N + 1
    states including the initial one); ``n_prerun`` the number N' of plain pCN
    steps before adaptation. ``J`` wins over ``rho`` when both are set.
    ``frozen_lambdas`` turns ApCN into a fixed-operator sampler.
    """

    kind: str = "apcn"
    beta: Optional[float] = None
    delta: Optional[float] = None
    n_steps: int = 10_000
    n_prerun: int = 0
    J: Optional[int] = None
    rho: float = 0.99
    eps: Optional[float] = None
    seed: int = 0
    init: str = "prior"
    thin: int = 1
    frozen_lambdas: Optional[np.ndarray] = None

    def resolved(self, basis: KlBasis) -> "SamplerConfig":
        """Copy with every defaulted quantity filled in and checked."""
        if self.kind not in SAMPLER_KINDS:
            raise ValueError(f"sampler kind must be one of {SAMPLER_KINDS}, got {self.kind!r}")
        cfg = replace(self)
        if cfg.kind == "cn":
            if cfg.delta is None:
                raise ValueError("plain CN needs delta")
            if not 0.0 < cfg.delta < 2.0:
                raise ValueError(f"delta must lie in (0, 2), got {cfg.delta}")
            cfg.beta = beta_from_delta(cfg.delta)
        else:
            if cfg.beta is None:
                if cfg.delta is None:
                    raise ValueError("pCN/ApCN need beta or delta")
                cfg.beta = beta_from_delta(cfg.delta)
            StepSize(cfg.beta, cfg.delta)
        if cfg.n_steps < 0 or not 0 <= cfg.n_prerun <= cfg.n_steps:
            raise ValueError("need n_steps >= n_prerun >= 0")
        if cfg.thin < 1:
            raise ValueError("thin must be >= 1")
        if cfg.init not in ("prior", "zero"):
            raise ValueError(f"init must be 'prior' or 'zero', got {cfg.init!r}")
        if cfg.kind == "apcn":
            if cfg.frozen_lambdas is not None:
                cfg.J = len(cfg.frozen_lambdas)
            elif cfg.J is None:
                cfg.J = select_J(basis.alphas, cfg.rho)
            if not 1 <= cfg.J <= basis.M:
                raise ValueError(f"J must be in [1, {basis.M}], got {cfg.J}")
            if cfg.eps is None:
                cfg.eps = 1e-3 * math.sqrt(basis.alphas[cfg.J - 1])
            if cfg.eps < 0:
                raise ValueError("eps must be nonnegative")
        return cfg


@dataclass
class Chain:
    """Stored states of one run.

    ``steps[i]`` is the iteration index of ``samples[i]`` (all of them when
    ``thin == 1``). ``accepted[i]`` tells whether that state came from an
    accepted proposal; the initial state is flagged accepted. Pre-run states
    are those with ``steps <= meta['n_prerun']``.
    """

    samples: np.ndarray
    accepted: np.ndarray
    phis: np.ndarray
    steps: np.ndarray
    meta: dict = field(default_factory=dict)
    lambda_steps: Optional[np.ndarray] = None
    lambda_traj: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def acceptance_rate(self) -> float:
        return self.meta["n_accepted"] / max(self.meta["n_steps"], 1)

    def segment(self, start_step: int) -> "Chain":
        keep = self.steps >= start_step
        return Chain(self.samples[keep], self.accepted[keep], self.phis[keep], self.steps[keep],
                     dict(self.meta), self.lambda_steps, self.lambda_traj)


def run_mcmc(potential: Callable[[np.ndarray], float], basis: KlBasis, config: SamplerConfig,
             u0: Optional[FieldState] = None, progress: bool = False) -> Chain:
    """Run a CN, pCN or ApCN chain.

    For ApCN, the first ``n_prerun`` transitions are plain pCN. The adaptive
    state is then built in batch from ``u^0..u^{N'}``; afterwards each proposal
    uses the state built from ``u^0..u^n`` and ``u^{n+1}`` is absorbed after the
    accept/reject step.
    """
    cfg = config.resolved(basis)
    rng = np.random.default_rng(cfg.seed)
    N, Np, thin = cfg.n_steps, cfg.n_prerun, cfg.thin

    if u0 is None:
        u = prior_sample(basis, rng) if cfg.init == "prior" else FieldState(np.zeros(basis.M))
    else:
        u = FieldState(np.asarray(u0.coeffs, dtype=float).copy())
    phi_u = _evaluate(potential, u, 0)
    if phi_u == math.inf:
        raise SamplerError("initial state has zero posterior density")

    n_store = N // thin + 1
    samples = np.empty((n_store, basis.M))
    accepted = np.zeros(n_store, dtype=bool)
    phis = np.empty(n_store)
    steps = np.arange(n_store) * thin
    samples[0], accepted[0], phis[0] = u.coeffs, True, phi_u

    adaptive = cfg.kind == "apcn" and cfg.frozen_lambdas is None
    adapt = None
    if cfg.kind == "apcn" and cfg.frozen_lambdas is not None:
        adapt = AdaptiveState.frozen(cfg.frozen_lambdas, basis.alphas)
    prerun_buf = None
    lambda_steps = lambda_traj = None
    if adaptive:
        prerun_buf = np.empty((Np + 1, cfg.J))
        prerun_buf[0] = u.coeffs[: cfg.J]
        if Np == 0:
            adapt = adapt_batch(prerun_buf[:1], cfg.J, cfg.eps, basis.alphas)
        n_traj = N - Np
        lambda_steps = np.arange(Np, Np + n_traj)
        lambda_traj = np.empty((n_traj, cfg.J))

    n_accepted = 0
    sum_a = 0.0
    iterator = range(N)
    if progress:
        from tqdm import tqdm
        iterator = tqdm(iterator, desc=cfg.kind)
    for n in iterator:
        if cfg.kind == "cn":
            v = cn_propose(u, cfg.delta, basis, rng)
        elif cfg.kind == "pcn" or adapt is None:
            v = pcn_propose(u, cfg.beta, basis, rng)
        else:
            if adaptive:
                lambda_traj[n - Np] = adapt.lambdas
            v = apcn_propose(u, cfg.beta, adapt, basis, rng)
        phi_v = _evaluate(potential, v, n + 1)
        a = acceptance_prob(phi_u, phi_v)
        sum_a += a
        ok = rng.uniform() <= a
        if ok:
            u, phi_u = v, phi_v
            n_accepted += 1

        if adaptive:
            if n + 1 < Np:
                prerun_buf[n + 1] = u.coeffs[: cfg.J]
            elif n + 1 == Np:
                prerun_buf[n + 1] = u.coeffs[: cfg.J]
                adapt = adapt_batch(prerun_buf, cfg.J, cfg.eps, basis.alphas)
                prerun_buf = None
            else:
                adapt = adapt_update(adapt, u)

        if (n + 1) % thin == 0:
            i = (n + 1) // thin
            samples[i], accepted[i], phis[i] = u.coeffs, ok, phi_u

    meta = {
        "kind": cfg.kind,
        "beta": cfg.beta,
        "delta": cfg.delta,
        "n_steps": N,
        "n_prerun": Np,
        "J": cfg.J,
        "rho": cfg.rho if cfg.kind == "apcn" else None,
        "eps": cfg.eps,
        "seed": cfg.seed,
        "init": cfg.init,
        "thin": thin,
        "M": basis.M,
        "n_accepted": n_accepted,
        "mean_accept_prob": sum_a / max(N, 1),
        "frozen": cfg.frozen_lambdas is not None,
    }
    if adapt is not None:
        meta["final_lambdas"] = adapt.lambdas.tolist()
    log.info("%s chain: %d steps, acceptance %.3f", cfg.kind, N, n_accepted / max(N, 1))
    return Chain(samples, accepted, phis, steps, meta, lambda_steps, lambda_traj)


def _evaluate(potential, u: FieldState, step: int) -> float:
    try:
        value = float(potential(u.coeffs))
    except Exception as exc:
        raise SamplerError(f"forward model failed at step {step}: {exc}") from exc
    if math.isnan(value) or value == -math.inf:
        raise SamplerError(f"potential is {value} at step {step}")
    return value
