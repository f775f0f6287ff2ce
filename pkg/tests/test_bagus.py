import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize

from bayes_lbn.bagus import (
    BagusConfig,
    PrecisionFit,
    fit_map,
    inclusion_probability,
    negative_log_posterior,
    penalty_weights,
    spike_slab_penalty,
    stationarity_residual,
    threshold_support,
)
from bayes_lbn.datagen import sample, sample_covariance
from bayes_lbn.model import SingularMatrixError, chain_model, covariance_from_model, precision_from_model

TIGHT = dict(tol=1e-10, inner_tol=1e-13, max_outer_iters=500, inner_max_iters=2000)


def lasso_profile_oracle(S, n, nu, tau):
    """Brute-force MAP for p=2 when the prior collapses to a single Laplace.

    The diagonals have a closed form given the off-diagonal b, so the fit
    reduces to a bounded scalar minimization over b.
    """
    s1 = S[0, 0] + 2 * tau / n
    s2 = S[1, 1] + 2 * tau / n

    def profile(b):
        D = (1 + math.sqrt(1 + 4 * s1 * s2 * b * b)) / (2 * s1 * s2)
        a, c = s2 * D, s1 * D
        value = 0.5 * n * (S[0, 0] * a + S[1, 1] * c + 2 * S[0, 1] * b - math.log(a * c - b * b))
        return value + abs(b) / nu + tau * (a + c), a, c

    bound = 10.0 / math.sqrt(s1 * s2)
    res = optimize.minimize_scalar(lambda b: profile(b)[0], bounds=(-bound, bound),
                                   method="bounded", options={"xatol": 1e-12})
    # the bounded search cannot land exactly on the kink at zero
    b = 0.0 if profile(0.0)[0] <= res.fun else res.x
    _, a, c = profile(b)
    return np.array([[a, b], [b, c]])


class TestConfig:
    def test_defaults_resolve(self):
        cfg = BagusConfig().resolved(100)
        assert cfg.nu0 == pytest.approx(math.sqrt(1 / 10000))
        assert (cfg.nu1, cfg.tau, cfg.threshold_T, cfg.eta) == (1.0, 1e-4, 0.5, 0.5)

    def test_explicit_nu0_kept(self):
        assert BagusConfig(nu0=0.2).resolved(100).nu0 == 0.2

    @pytest.mark.parametrize("kw", [dict(nu0=2.0, nu1=1.0), dict(eta=1.0), dict(tau=0.0),
                                    dict(threshold_T=1.0), dict(max_outer_iters=0), dict(nu0=-1.0)])
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            BagusConfig(**kw)

    def test_dict_round_trip_and_unknown_keys(self):
        cfg = BagusConfig(nu0=0.01, eta=0.3)
        assert BagusConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ValueError):
            BagusConfig.from_dict({"lambda": 1})


class TestPrior:
    def test_collapsed_penalty(self):
        for eta in (0.1, 0.5, 0.9):
            cfg = BagusConfig(nu0=0.3, nu1=0.3, eta=eta)
            for t in (-2.0, 0.0, 0.7):
                assert spike_slab_penalty(t, cfg) == pytest.approx(abs(t) / 0.3 - math.log(1 / 0.6))

    def test_collapsed_inclusion_is_eta(self):
        cfg = BagusConfig(nu0=0.3, nu1=0.3, eta=0.2)
        np.testing.assert_allclose(inclusion_probability(np.array([0.0, 1.0, -5.0]), cfg), 0.2)

    def test_inclusion_at_zero(self):
        cfg = BagusConfig(nu0=0.1, nu1=1.0, eta=0.5)
        assert inclusion_probability(0.0, cfg) == pytest.approx(0.25 / (0.25 + 2.5))

    def test_inclusion_limit(self):
        cfg = BagusConfig(nu0=0.1, nu1=1.0)
        assert inclusion_probability(50.0, cfg) == pytest.approx(1.0)
        assert inclusion_probability(-1e6, cfg) == 1.0

    @given(st.floats(-50, 50), st.floats(1e-3, 0.5), st.floats(0.01, 0.99))
    @settings(max_examples=80, deadline=None)
    def test_weights_are_penalty_slope(self, t, nu0, eta):
        cfg = BagusConfig(nu0=nu0, nu1=1.0, eta=eta)
        a = abs(t) + 0.1
        h = 1e-6 * max(1.0, a)
        fd = (spike_slab_penalty(a + h, cfg) - spike_slab_penalty(a - h, cfg)) / (2 * h)
        assert penalty_weights(np.array(a), cfg) == pytest.approx(fd, rel=1e-5, abs=1e-6)


class TestObjective:
    def test_hand_value(self):
        cfg = BagusConfig(nu0=0.1, tau=0.5)
        assert negative_log_posterior(np.eye(1), np.eye(1), 2, cfg) == pytest.approx(1.5)

    def test_tau_linearity(self, rng):
        S = np.cov(rng.normal(size=(3, 50)))
        om = np.linalg.inv(S)
        base = negative_log_posterior(om, S, 50, BagusConfig(nu0=0.1, tau=0.2))
        bumped = negative_log_posterior(om, S, 50, BagusConfig(nu0=0.1, tau=0.7))
        assert bumped - base == pytest.approx(0.5 * np.trace(om), rel=1e-12)

    def test_non_spd_rejected(self):
        with pytest.raises(SingularMatrixError):
            negative_log_posterior(np.array([[1.0, 2.0], [2.0, 1.0]]), np.eye(2), 10, BagusConfig(nu0=0.1))


class TestFitMap:
    def test_p1_closed_form(self):
        for s, n, tau in [(1.0, 10, 1e-4), (3.7, 2, 0.5), (0.01, 1000, 2.0)]:
            fit = fit_map(np.array([[s]]), n, BagusConfig(tau=tau))
            assert fit.omega_hat[0, 0] == n / (n * s + 2 * tau)

    def test_identity_gives_empty_support(self):
        fit = fit_map(np.eye(3), 1000)
        assert threshold_support(fit, 0.5) == set()

    @pytest.mark.parametrize("seed", range(6))
    def test_p2_collapsed_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.choice([30, 200, 2000]))
        x = rng.normal(size=(n, 2)) @ np.array([[1.0, rng.uniform(-0.8, 0.8)], [0.0, 1.0]])
        S, _ = sample_covariance(x)
        nu = float(rng.choice([0.02, 0.2, 1.0]))
        tau = 1e-4
        fit = fit_map(S, n, BagusConfig(nu0=nu, nu1=nu, tau=tau, **TIGHT))
        oracle = lasso_profile_oracle(S, n, nu, tau)
        assert np.abs(fit.omega_hat - oracle).max() < 1e-6

    def test_population_chain(self):
        sigma = covariance_from_model(chain_model(3, 0.8))
        fit = fit_map(sigma, 10**6)
        assert np.abs(fit.omega_hat - precision_from_model(chain_model(3, 0.8))).max() < 1e-2
        assert threshold_support(fit, 0.5) == {(0, 1), (1, 2)}

    def test_chain_statistical_recovery(self):
        hits = 0
        for seed in range(20):
            S, n = sample_covariance(sample(chain_model(2, 0.5), 10_000, seed=seed))
            hits += threshold_support(fit_map(S, n), 0.5) == {(0, 1)}
        assert hits >= 19

    def test_monotone_and_stationary(self, rng):
        for _ in range(15):
            p = int(rng.integers(2, 15))
            n = int(rng.choice([50, 500]))
            S, _ = sample_covariance(rng.normal(size=(n, p)) @ rng.normal(size=(p, p)))
            fit = fit_map(S, n, BagusConfig(**TIGHT))
            assert np.all(np.diff(fit.objective_trace) <= 1e-8 * np.abs(fit.objective_trace[:-1]).clip(1))
            assert fit.converged
            assert stationarity_residual(fit.omega_hat, S, n, fit_config(n)) < 1e-5
            assert np.linalg.eigvalsh(fit.omega_hat)[0] > 0

    def test_warm_start_same_optimum_region(self, rng):
        S, n = sample_covariance(rng.normal(size=(300, 5)))
        cold = fit_map(S, n)
        warm = fit_map(S, n, omega_init=cold.omega_hat)
        assert np.abs(warm.omega_hat - cold.omega_hat).max() < 1e-3

    def test_bad_init_falls_back(self):
        fit = fit_map(np.eye(2), 100, omega_init=-np.eye(2))
        assert any("positive definite" in w for w in fit.warnings)

    def test_rejects_asymmetric(self):
        with pytest.raises(ValueError):
            fit_map(np.array([[1.0, 0.3], [0.0, 1.0]]), 10)

    def test_spectral_bound_warning(self):
        with pytest.warns(RuntimeWarning, match="B0"):
            fit = fit_map(0.01 * np.eye(2), 100, BagusConfig(spectral_bound_B0=1.0))
        assert fit.warnings


def fit_config(n):
    return BagusConfig(**TIGHT).resolved(n)


class TestThresholdSupport:
    def _fit(self, prob):
        prob = np.asarray(prob, dtype=float)
        return PrecisionFit(np.eye(len(prob)), prob, [0.0], True, 1, 1.0)

    def test_empty(self):
        assert threshold_support(self._fit(np.eye(3)), 0.5) == set()

    def test_argmax_included(self):
        prob = np.array([[1, 0.3, 0.8], [0.3, 1, 0.1], [0.8, 0.1, 1]])
        assert threshold_support(self._fit(prob), 0.79) == {(0, 2)}

    def test_bad_threshold(self):
        with pytest.raises(ValueError):
            threshold_support(self._fit(np.eye(2)), 1.0)
