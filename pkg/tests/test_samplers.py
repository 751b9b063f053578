import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from apcn.kl import FieldState, Grid, MaternParams, build_kl_basis, build_kl_basis_from_matrix
from apcn.models import ZeroPotential
from apcn.samplers import (AdaptiveState, SamplerConfig, SamplerError, StepSize, acceptance_prob, adapt_batch,
                           adapt_update, apcn_coefficients, apcn_propose, beta_from_delta, cn_propose,
                           cn_substitution_check, contraction_factor, pcn_propose, run_mcmc)


@pytest.fixture(scope="module")
def basis():
    return build_kl_basis(Grid.uniform(31), MaternParams(1.0, 1.5, 0.3))


@pytest.fixture(scope="module")
def flat_basis():
    """Many independent modes sharing one eigenvalue, for one-shot moment checks."""
    g = Grid.uniform(4000)
    return build_kl_basis_from_matrix(g, 0.5 * np.diag(1.0 / g.weights))


def _state(basis, seed=0):
    rng = np.random.default_rng(seed)
    return FieldState(basis.sqrt_alphas * rng.standard_normal(basis.M))


# -- step size ---------------------------------------------------------------

def test_beta_delta_relation():
    s = StepSize.from_delta(0.3)
    assert abs(s.beta - math.sqrt(8 * 0.3) / 2.3) < 1e-12
    assert beta_from_delta(2.0) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        StepSize(0.0)
    with pytest.raises(ValueError):
        StepSize(0.5, delta=0.3)


@given(st.floats(1e-6, 2.0))
def test_beta_in_unit_interval(delta):
    assert 0.0 <= beta_from_delta(delta) <= 1.0 + 1e-15


# -- proposals ---------------------------------------------------------------

def test_pcn_beta_zero_is_identity(basis):
    u = _state(basis)
    v = pcn_propose(u, 0.0, basis, np.random.default_rng(1))
    assert np.array_equal(v.coeffs, u.coeffs)


def test_pcn_beta_one_forgets_current_state(basis):
    v1 = pcn_propose(_state(basis, 1), 1.0, basis, np.random.default_rng(5))
    v2 = pcn_propose(_state(basis, 2), 1.0, basis, np.random.default_rng(5))
    assert np.array_equal(v1.coeffs, v2.coeffs)


def test_pcn_preserves_prior_variance(flat_basis):
    u = _state(flat_basis, 3)
    v = pcn_propose(u, 0.4, flat_basis, np.random.default_rng(4))
    # 4000 independent N(0, 0.5) coordinates: SE of the variance is 0.5*sqrt(2/4000)
    assert abs(v.coeffs.var() - 0.5) < 3 * 0.5 * math.sqrt(2 / 4000)


def test_cn_small_delta_is_continuous(basis):
    u = _state(basis)
    v = cn_propose(u, 1e-12, basis, np.random.default_rng(1))
    # the noise term scales like sqrt(8 delta) ~ 3e-6 per mode
    assert np.linalg.norm(v.coeffs - u.coeffs) < 1e-4


def test_cn_mode_at_half_delta_is_fresh_draw():
    g = Grid.uniform(3)
    delta = 0.4
    b = build_kl_basis_from_matrix(g, (delta / 2) * np.diag(1 / g.weights))
    v1 = cn_propose(FieldState(np.array([5.0, -1.0, 2.0])), delta, b, np.random.default_rng(8))
    v2 = cn_propose(FieldState(np.zeros(3)), delta, b, np.random.default_rng(8))
    np.testing.assert_allclose(v1.coeffs, v2.coeffs, atol=1e-15)


def test_cn_preserves_prior_variance(flat_basis):
    u = _state(flat_basis, 3)
    v = cn_propose(u, 0.7, flat_basis, np.random.default_rng(4))
    assert abs(v.coeffs.var() - 0.5) < 3 * 0.5 * math.sqrt(2 / 4000)


def test_apcn_reduces_to_pcn_bitwise(basis):
    u = _state(basis)
    J = 6
    frozen = AdaptiveState.frozen(basis.alphas[:J], basis.alphas)
    a = apcn_propose(u, 0.3, frozen, basis, np.random.default_rng(11))
    b = pcn_propose(u, 0.3, basis, np.random.default_rng(11))
    assert a.coeffs.tobytes() == b.coeffs.tobytes()


def test_apcn_beta_one_matches_prior_draw(basis):
    frozen = AdaptiveState.frozen(basis.alphas[:4], basis.alphas)
    v = apcn_propose(_state(basis), 1.0, frozen, basis, np.random.default_rng(2))
    xi = np.random.default_rng(2).standard_normal(basis.M)
    np.testing.assert_allclose(v.coeffs, basis.sqrt_alphas * xi, rtol=1e-14, atol=0)


def test_apcn_quarter_eigenvalue_mode(basis):
    a1 = basis.alphas[0]
    adapt = AdaptiveState.frozen([a1 / 4], basis.alphas)
    u = _state(basis)
    v = apcn_propose(u, 1.0, adapt, basis, np.random.default_rng(9))
    xi = np.random.default_rng(9).standard_normal(basis.M)
    expected = math.sqrt(3) / 2 * u.coeffs[0] + math.sqrt(a1 / 4) * xi[0]
    assert v.coeffs[0] == pytest.approx(expected, rel=1e-13)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 1.0), st.lists(st.floats(0.0, 1.0), min_size=1, max_size=8))
def test_apcn_contraction_bounds(beta, fracs):
    b = build_kl_basis(Grid.uniform(12), MaternParams(1.0, 1.5, 0.3))
    lam = np.array(fracs) * b.alphas[: len(fracs)]
    coef, _ = apcn_coefficients(beta, AdaptiveState.frozen(lam, b.alphas), b)
    assert np.all(coef >= math.sqrt(1 - beta**2) - 1e-15)
    assert np.all(coef <= 1.0)


# -- scalar helpers ----------------------------------------------------------

def test_contraction_factor_examples():
    assert contraction_factor(0.3, 2.0, 2.0) == pytest.approx(math.sqrt(1 - 0.09))
    assert contraction_factor(0.3, 0.0, 2.0) == 1.0
    assert contraction_factor(1.0, 0.25, 1.0) == pytest.approx(math.sqrt(3) / 2)
    with pytest.raises(ValueError):
        contraction_factor(0.5, 2.0, 1.0)


def test_substitution_examples():
    beta, lam, res = cn_substitution_check(1e-300, 1e-300, 1.0)
    assert res == 0.0
    beta, lam, res = cn_substitution_check(2.0, 1.0, 1.0)
    assert beta == pytest.approx(1.0)
    assert res < 1e-12


@given(st.floats(1e-3, 1.999), st.floats(1e-4, 1e2), st.floats(1e-4, 1e2))
def test_substitution_identity_property(delta, k, alpha):
    assert cn_substitution_check(delta, k, alpha)[2] < 1e-12


def test_acceptance_examples():
    assert acceptance_prob(1.3, 1.3) == 1.0
    assert acceptance_prob(0.0, math.log(2)) == pytest.approx(0.5)
    assert acceptance_prob(0.0, math.inf) == 0.0
    assert acceptance_prob(5.0, 1.0) == 1.0
    with pytest.raises(ValueError):
        acceptance_prob(math.nan, 0.0)


@given(st.floats(0, 1e3), st.floats(0, 1e3))
def test_acceptance_in_unit_interval(a, b):
    assert 0.0 <= acceptance_prob(a, b) <= 1.0


# -- adaptation --------------------------------------------------------------

def test_adapt_update_two_samples():
    s = AdaptiveState.empty(1, 0.0, [100.0])
    s = adapt_update(s, FieldState(np.array([1.0])))
    s = adapt_update(s, FieldState(np.array([3.0])))
    assert s.n == 2 and s.xbar[0] == 2.0 and s.s[0] == 10.0
    assert s.lambdas[0] == pytest.approx(10 / 2 - 4)


def test_adapt_update_floor_binds():
    s = AdaptiveState.empty(2, 0.01, [1.0, 1.0])
    for _ in range(5):
        s = adapt_update(s, FieldState(np.array([0.3, -0.2])))
    np.testing.assert_allclose(s.lambdas, 1e-4, rtol=1e-9)


def test_adapt_update_cap_binds():
    s = AdaptiveState.empty(1, 0.0, [0.5])
    for x in (-3.0, 3.0, -3.0, 3.0):
        s = adapt_update(s, FieldState(np.array([x])))
    assert s.lambdas[0] == 0.5


def test_cap_beats_floor_when_alpha_tiny():
    s = adapt_batch(np.zeros((3, 1)), 1, 0.1, [1e-4])
    assert s.lambdas[0] == 1e-4


def test_adapt_batch_examples():
    s = adapt_batch(np.array([[0.4, 1.0]]), 2, 0.05, [1.0, 1.0])
    np.testing.assert_allclose(s.lambdas, 0.05**2)
    eps = 0.1
    s = adapt_batch(np.array([[1.0], [3.0]]), 1, eps, [10.0])
    assert s.lambdas[0] == pytest.approx(1 + eps**2)
    with pytest.raises(ValueError):
        adapt_batch(np.empty((0, 2)), 2, 0.1, [1.0, 1.0])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 400), st.integers(1, 5), st.floats(0.0, 0.5), st.integers(0, 2**31))
def test_recursive_equals_batch(n, J, eps, seed):
    rng = np.random.default_rng(seed)
    alphas = np.sort(rng.uniform(0.1, 4.0, size=J + 2))[::-1]
    X = rng.normal(rng.normal(size=J + 2), 1.0, size=(n, J + 2))
    s = AdaptiveState.empty(J, eps, alphas)
    for x in X:
        s = adapt_update(s, FieldState(x))
    b = adapt_batch(X, J, eps, alphas)
    assert s.n == b.n == n
    np.testing.assert_allclose(s.xbar, b.xbar, rtol=1e-10, atol=1e-13)
    np.testing.assert_allclose(s.s, b.s, rtol=1e-10)
    np.testing.assert_allclose(s.lambdas, b.lambdas, rtol=1e-10)
    assert np.all(s.lambdas <= alphas[:J])
    assert np.all(s.lambdas >= np.minimum(eps**2, alphas[:J]) * (1 - 1e-12))


# -- run_mcmc ----------------------------------------------------------------

def test_flat_likelihood_accepts_everything(basis):
    for kind, kw in [("cn", dict(delta=0.5)), ("pcn", dict(beta=0.3)), ("apcn", dict(beta=0.3, n_prerun=50))]:
        ch = run_mcmc(ZeroPotential(), basis, SamplerConfig(kind=kind, n_steps=300, seed=1, **kw))
        assert len(ch) == 301
        assert ch.accepted.all()
        assert ch.meta["mean_accept_prob"] == 1.0


def test_full_prerun_is_pcn(basis):
    phi = lambda c: float(np.sum((c[:3] - 0.2) ** 2) / 0.02)
    a = run_mcmc(phi, basis, SamplerConfig(kind="apcn", beta=0.3, n_steps=400, n_prerun=400, seed=4))
    b = run_mcmc(phi, basis, SamplerConfig(kind="pcn", beta=0.3, n_steps=400, seed=4))
    assert a.samples.tobytes() == b.samples.tobytes()


def test_frozen_prior_eigenvalues_is_pcn(basis):
    phi = lambda c: float(np.sum((c[:3] - 0.2) ** 2) / 0.02)
    a = run_mcmc(phi, basis, SamplerConfig(kind="apcn", beta=0.3, n_steps=400, seed=4,
                                           frozen_lambdas=basis.alphas[:5]))
    b = run_mcmc(phi, basis, SamplerConfig(kind="pcn", beta=0.3, n_steps=400, seed=4))
    assert a.samples.tobytes() == b.samples.tobytes()


def test_rejected_steps_repeat_state(basis):
    phi = lambda c: float(np.sum(c[:3] ** 2) / 0.001)
    ch = run_mcmc(phi, basis, SamplerConfig(kind="apcn", beta=0.5, n_steps=500, n_prerun=100, seed=2))
    rejected = np.nonzero(~ch.accepted)[0]
    assert rejected.size > 0
    for i in rejected:
        assert np.array_equal(ch.samples[i], ch.samples[i - 1])
        assert ch.phis[i] == ch.phis[i - 1]


def test_chain_is_deterministic(basis):
    phi = lambda c: float(np.sum(c[:3] ** 2) / 0.01)
    cfg = SamplerConfig(kind="apcn", beta=0.2, n_steps=300, n_prerun=50, seed=9)
    a, b = run_mcmc(phi, basis, cfg), run_mcmc(phi, basis, cfg)
    assert a.samples.tobytes() == b.samples.tobytes()
    assert a.lambda_traj.tobytes() == b.lambda_traj.tobytes()


def test_adaptation_uses_history_up_to_current_step(basis):
    phi = lambda c: float(np.sum(c[:2] ** 2) / 0.01)
    ch = run_mcmc(phi, basis, SamplerConfig(kind="apcn", beta=0.2, n_steps=60, n_prerun=20, J=2, eps=0.01,
                                            seed=3))
    # proposal at iteration n uses the state built from u^0..u^n
    for k, n in enumerate(ch.lambda_steps):
        ref = adapt_batch(ch.samples[: n + 1], 2, 0.01, basis.alphas)
        np.testing.assert_allclose(ch.lambda_traj[k], ref.lambdas, rtol=1e-10)


def test_thinning(basis):
    phi = lambda c: float(np.sum(c[:2] ** 2) / 0.1)
    full = run_mcmc(phi, basis, SamplerConfig(kind="pcn", beta=0.3, n_steps=100, seed=5))
    thin = run_mcmc(phi, basis, SamplerConfig(kind="pcn", beta=0.3, n_steps=100, seed=5, thin=10))
    assert len(thin) == 11
    assert np.array_equal(thin.samples, full.samples[::10])
    assert thin.meta["n_accepted"] == full.meta["n_accepted"]


def test_model_failure_reports_step(basis):
    calls = {"n": 0}

    def phi(c):
        calls["n"] += 1
        if calls["n"] == 4:
            raise RuntimeError("solver blew up")
        return 0.0

    with pytest.raises(SamplerError, match="step 3"):
        run_mcmc(phi, basis, SamplerConfig(kind="pcn", beta=0.3, n_steps=10))


def test_nan_potential_rejected(basis):
    with pytest.raises(SamplerError):
        run_mcmc(lambda c: math.nan, basis, SamplerConfig(kind="pcn", beta=0.3, n_steps=3))


def test_truncated_potential_never_leaves_ball(basis):
    R = 0.5
    phi = lambda c: math.inf if np.linalg.norm(c) > R else 0.0
    ch = run_mcmc(phi, basis, SamplerConfig(kind="pcn", beta=0.5, n_steps=500, init="zero", seed=1))
    assert np.all(np.linalg.norm(ch.samples, axis=1) <= R)
    assert not ch.accepted.all()


@pytest.mark.parametrize("cfg", [
    SamplerConfig(kind="mala", beta=0.2),
    SamplerConfig(kind="pcn"),
    SamplerConfig(kind="pcn", beta=1.5),
    SamplerConfig(kind="cn"),
    SamplerConfig(kind="pcn", beta=0.2, n_steps=10, n_prerun=20),
    SamplerConfig(kind="apcn", beta=0.2, J=0),
])
def test_config_validation(basis, cfg):
    with pytest.raises(ValueError):
        cfg.resolved(basis)


def test_config_defaults(basis):
    cfg = SamplerConfig(kind="apcn", delta=0.1, rho=0.9).resolved(basis)
    assert cfg.beta == pytest.approx(beta_from_delta(0.1))
    assert cfg.J >= 1
    assert cfg.eps == pytest.approx(1e-3 * math.sqrt(basis.alphas[cfg.J - 1]))
    assert SamplerConfig(kind="apcn", beta=0.2, J=3, rho=0.5).resolved(basis).J == 3
