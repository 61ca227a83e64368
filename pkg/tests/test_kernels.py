"""
Tests for the GP covariance algebra shared by the DP-GP model.

Dense explicit-inverse computations serve as independent oracles for the
Cholesky-based implementations.
"""
import logging
import math
import time

import numpy as np
import pytest

from traj_pipeline.core.errors import NotPositiveDefinite
from traj_pipeline.models.kernels import (
    ClusterCovConfig,
    ClusterFactor,
    KernelParams,
    assemble_cluster_cov,
    cholesky_with_jitter,
    compound_covariance,
    gp_posterior_predict,
    log_marginal_likelihood,
    se_kernel,
    se_matrix,
    stack_cluster,
)

logger = logging.getLogger(__name__)

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


def _cfg(latent=(1.0, 1.0), individual=(0.5, 1.0), nugget=0.0, jitter=1e-8) -> ClusterCovConfig:
    return ClusterCovConfig(
        latent=KernelParams(variance=latent[0], lengthscale=latent[1]),
        individual=KernelParams(variance=individual[0], lengthscale=individual[1]),
        nugget=nugget,
        jitter=jitter,
    )


def _brute_force(t_hat, owner, cfg: ClusterCovConfig) -> np.ndarray:
    d = len(t_hat)
    k = np.empty((d, d))
    for i in range(d):
        for j in range(d):
            k[i, j] = compound_covariance(t_hat[i], t_hat[j], owner[i], owner[j], cfg, same_observation=(i == j))
    return k


def _random_cluster(rng: np.random.Generator, max_dim: int = 20):
    blocks = []
    dim = 0
    for _ in range(int(rng.integers(1, 6))):
        m = int(rng.integers(1, 5))
        if dim + m > max_dim:
            break
        times = np.sort(rng.uniform(0.0, 6.0, size=m))
        blocks.append((times, rng.normal(size=m)))
        dim += m
    cfg = _cfg(
        latent=(rng.uniform(0.5, 2.0), rng.uniform(0.5, 3.0)),
        individual=(rng.uniform(0.05, 1.0), rng.uniform(0.5, 3.0)),
        nugget=rng.uniform(0.1, 0.5),
    )
    return stack_cluster(blocks), cfg


def _dense_logpdf(y: np.ndarray, k: np.ndarray) -> float:
    _, logdet = np.linalg.slogdet(k)
    return float(-0.5 * y @ np.linalg.inv(k) @ y - 0.5 * logdet - 0.5 * len(y) * math.log(2 * math.pi))


# ---------------------------------------------------------------------------
# 1. Kernel functions
# ---------------------------------------------------------------------------

class TestKernelFunctions:
    """Squared-exponential and compound covariance."""

    def test_se_zero_lag(self):
        assert se_kernel(2.0, 2.0, KernelParams(variance=1.0)) == 1.0

    def test_se_unit_lag(self):
        assert se_kernel(1.0, 2.0, KernelParams()) == pytest.approx(0.6065306597126334, abs=1e-15)

    def test_se_far_field(self):
        assert se_kernel(0.0, 100.0, KernelParams()) < 1e-300

    def test_se_symmetric(self):
        p = KernelParams(variance=2.0, lengthscale=0.7)
        assert se_kernel(1.3, 4.1, p) == se_kernel(4.1, 1.3, p)

    def test_compound_cross_subject(self):
        cfg = _cfg(individual=(7.0, 1.0))
        assert compound_covariance(2.0, 2.0, 0, 1, cfg) == 1.0

    def test_compound_same_subject(self):
        cfg = _cfg(individual=(0.5, 1.0))
        assert compound_covariance(2.0, 2.0, 0, 0, cfg) == pytest.approx(1.5, abs=1e-15)

    def test_two_subjects_two_times(self):
        cfg = _cfg(latent=(1.3, 0.8), individual=(0.4, 1.7))
        times = np.array([1.5, 2.0])
        t_hat = np.concatenate([times, times])
        owner = np.array([0, 0, 1, 1])
        k = _brute_force(t_hat, owner, cfg)
        k_f = se_matrix(t_hat, t_hat, cfg.latent)
        k_n = se_matrix(times, times, cfg.individual)
        expected = k_f.copy()
        expected[:2, :2] += k_n
        expected[2:, 2:] += k_n
        np.testing.assert_allclose(k, expected, atol=1e-12, rtol=0)


# ---------------------------------------------------------------------------
# 2. Matrix assembly and jitter
# ---------------------------------------------------------------------------

class TestAssembly:
    """Stacked covariance construction and Cholesky factorization."""

    def test_one_by_one(self):
        cfg = _cfg(latent=(1.0, 1.0), individual=(0.5, 1.0), nugget=0.1, jitter=1e-8)
        cov = assemble_cluster_cov(stack_cluster([(np.array([2.0]), np.array([0.3]))]), cfg)
        assert cov.matrix.shape == (1, 1)
        assert cov.matrix[0, 0] == pytest.approx(1.0 + 0.5 + 0.1 + 1e-8, abs=1e-15)

    def test_matches_scalar_oracle(self):
        cfg = _cfg(latent=(0.9, 2.0), individual=(0.3, 1.0), nugget=0.05)
        schedule = np.array([1.5, 2.0, 4.0, 5.0])
        sc = stack_cluster([(schedule, np.zeros(4))] * 3)
        cov = assemble_cluster_cov(sc, cfg)
        oracle = _brute_force(sc.t_hat, sc.owner, cfg)
        oracle[np.diag_indices_from(oracle)] += cov.jitter
        np.testing.assert_allclose(cov.matrix, oracle, atol=1e-12, rtol=0)
        assert np.array_equal(cov.matrix, cov.matrix.T)

    def test_decomposition_identity_random(self):
        rng = np.random.default_rng(21)
        for _ in range(50):
            sc, cfg = _random_cluster(rng)
            cov = assemble_cluster_cov(sc, cfg)
            k_f = se_matrix(sc.t_hat, sc.t_hat, cfg.latent)
            same = sc.owner[:, None] == sc.owner[None, :]
            k_n = np.where(same, se_matrix(sc.t_hat, sc.t_hat, cfg.individual), 0.0)
            expected = k_f + k_n + (cfg.nugget + cov.jitter) * np.eye(sc.dim)
            assert np.max(np.abs(cov.matrix - cov.matrix.T)) < 1e-12
            np.testing.assert_allclose(cov.matrix, expected, atol=1e-12, rtol=0)
            np.testing.assert_allclose(cov.chol @ cov.chol.T, cov.matrix, atol=1e-10)

    def test_jitter_escalates_for_singular_matrix(self):
        chol, used = cholesky_with_jitter(np.ones((3, 3)), 0.0)
        assert used > 0
        np.testing.assert_allclose(chol @ chol.T, np.ones((3, 3)) + used * np.eye(3), atol=1e-12)

    def test_indefinite_matrix_fails(self):
        with pytest.raises(NotPositiveDefinite):
            cholesky_with_jitter(-np.eye(2), 1e-8)

    def test_stack_blocks(self):
        sc = stack_cluster([(np.array([1.0, 2.0]), np.array([3.0, 4.0])), (np.array([1.5]), np.array([5.0]))])
        assert sc.owner.tolist() == [0, 0, 1]
        assert sc.t_hat.tolist() == [1.0, 2.0, 1.5]
        assert sc.y_hat.tolist() == [3.0, 4.0, 5.0]
        assert sc.n_subjects == 2


# ---------------------------------------------------------------------------
# 3. Marginal likelihood
# ---------------------------------------------------------------------------

class TestMarginalLikelihood:
    """``log N(ŷ | 0, K̂)`` via Cholesky."""

    def _unit(self) -> ClusterCovConfig:
        return _cfg(latent=(1.0, 1.0), individual=(0.0, 1.0), nugget=0.0, jitter=0.0)

    def test_scalar_zero(self):
        sc = stack_cluster([(np.array([1.0]), np.array([0.0]))])
        assert log_marginal_likelihood(sc, self._unit()) == pytest.approx(-HALF_LOG_2PI, abs=1e-12)

    def test_scalar_one(self):
        sc = stack_cluster([(np.array([1.0]), np.array([1.0]))])
        assert log_marginal_likelihood(sc, self._unit()) == pytest.approx(-0.5 - HALF_LOG_2PI, abs=1e-12)

    def test_empty_cluster(self):
        assert log_marginal_likelihood(stack_cluster([]), _cfg()) == 0.0

    def test_dense_oracle(self):
        rng = np.random.default_rng(5)
        start = time.perf_counter()
        for _ in range(50):
            sc, cfg = _random_cluster(rng)
            cov = assemble_cluster_cov(sc, cfg)
            expected = _dense_logpdf(sc.y_hat, cov.matrix)
            assert log_marginal_likelihood(sc, cfg) == pytest.approx(expected, abs=1e-8)
        elapsed = time.perf_counter() - start
        logger.info(f"50 dense-oracle comparisons in {elapsed:.3f}s")
        assert elapsed < 1.0

    def test_subject_permutation_invariance(self):
        rng = np.random.default_rng(8)
        blocks = [(np.sort(rng.uniform(0, 6, size=3)), rng.normal(size=3)) for _ in range(4)]
        cfg = _cfg(nugget=0.2)
        forward = log_marginal_likelihood(stack_cluster(blocks), cfg)
        shuffled = [(t[::-1], y[::-1]) for t, y in reversed(blocks)]
        assert log_marginal_likelihood(stack_cluster(shuffled), cfg) == pytest.approx(forward, abs=1e-9)

    def test_factor_matches_function(self):
        rng = np.random.default_rng(13)
        sc, cfg = _random_cluster(rng)
        assert ClusterFactor.build(sc, cfg).log_marginal_likelihood == pytest.approx(
            log_marginal_likelihood(sc, cfg), abs=1e-12
        )

    def test_predictive_logpdf_is_likelihood_difference(self):
        rng = np.random.default_rng(17)
        blocks = [(np.sort(rng.uniform(0, 6, size=3)), rng.normal(size=3)) for _ in range(3)]
        cfg = _cfg(nugget=0.15)
        new = (np.array([1.5, 2.0, 4.0]), np.array([0.2, -0.1, 0.4]))
        factor = ClusterFactor.build(stack_cluster(blocks), cfg)
        delta = log_marginal_likelihood(stack_cluster(blocks + [new]), cfg) - factor.log_marginal_likelihood
        assert factor.predictive_logpdf(*new) == pytest.approx(delta, abs=1e-9)

    def test_predictive_logpdf_empty_cluster_is_singleton(self):
        cfg = _cfg(nugget=0.15)
        new = (np.array([1.5, 2.0, 4.0]), np.array([0.2, -0.1, 0.4]))
        empty = ClusterFactor.build(stack_cluster([]), cfg)
        assert empty.predictive_logpdf(*new) == pytest.approx(
            log_marginal_likelihood(stack_cluster([new]), cfg), abs=1e-12
        )

    def test_downdate_matches_fresh_factor(self):
        rng = np.random.default_rng(21)
        for _ in range(10):
            times = [np.sort(rng.uniform(0, 6, size=int(rng.integers(1, 5)))) for _ in range(4)]
            blocks = [(t, rng.normal(size=len(t))) for t in times]
            cfg = _cfg(latent=(1.5, 2.0), individual=(0.3, 1.5), nugget=0.1)
            factor = ClusterFactor.build(stack_cluster(blocks), cfg)
            for k in range(len(blocks)):
                down = factor.without_subject(k)
                fresh = ClusterFactor.build(stack_cluster(blocks[:k] + blocks[k + 1:]), cfg)
                np.testing.assert_allclose(down.stacked.owner, fresh.stacked.owner)
                np.testing.assert_allclose(down.chol, fresh.chol, atol=1e-10)
                np.testing.assert_allclose(down.whitened, fresh.whitened, atol=1e-10)
                assert down.log_marginal_likelihood == pytest.approx(fresh.log_marginal_likelihood, abs=1e-9)

    def test_downdate_last_subject_empties(self):
        cfg = _cfg(nugget=0.1)
        factor = ClusterFactor.build(stack_cluster([(np.array([1.5, 2.0]), np.array([0.1, 0.2]))]), cfg)
        assert factor.without_subject(0).stacked.dim == 0
        with pytest.raises(ValueError):
            factor.without_subject(1)

    def test_append_matches_fresh_factor(self):
        rng = np.random.default_rng(22)
        cfg = _cfg(latent=(1.5, 2.0), individual=(0.3, 1.5), nugget=0.1)
        blocks = []
        factor = ClusterFactor.build(stack_cluster([]), cfg)
        for _ in range(5):
            times = np.sort(rng.uniform(0, 6, size=int(rng.integers(1, 5))))
            blocks.append((times, rng.normal(size=len(times))))
            factor = factor.with_subject(*blocks[-1])
            fresh = ClusterFactor.build(stack_cluster(blocks), cfg)
            np.testing.assert_allclose(factor.chol, fresh.chol, atol=1e-10)
            np.testing.assert_allclose(factor.whitened, fresh.whitened, atol=1e-10)
        assert factor.stacked.n_subjects == 5

    def test_finite_differences(self):
        sc = stack_cluster([(np.array([1.5, 2.0, 4.0, 5.0]), np.array([0.1, 0.3, 0.2, -0.4]))] * 2)
        base = dict(latent=(1.0, 2.0), individual=(0.3, 1.5), nugget=0.1)
        h = 1e-4
        for key, pos in (("latent", 0), ("latent", 1), ("individual", 0), ("individual", 1)):
            def lml(delta: float, key=key, pos=pos) -> float:
                params = dict(base)
                pair = list(params[key])
                pair[pos] += delta
                params[key] = tuple(pair)
                return log_marginal_likelihood(sc, _cfg(**params))

            full = (lml(h) - lml(-h)) / (2 * h)
            half = (lml(h / 2) - lml(-h / 2)) / h
            assert math.isfinite(full)
            assert full == pytest.approx(half, rel=0.1, abs=1e-6)


# ---------------------------------------------------------------------------
# 4. Posterior prediction
# ---------------------------------------------------------------------------

class TestPrediction:
    """GP conditioning within a cluster."""

    def test_noiseless_interpolation(self):
        cfg = _cfg(latent=(1.0, 1.0), individual=(0.5, 1.0), nugget=0.0, jitter=1e-10)
        sc = stack_cluster([(np.array([1.5, 4.0]), np.array([0.3, -0.2]))])
        mean, var = gp_posterior_predict(sc, cfg, 1.5, 0)
        assert mean == pytest.approx(0.3, abs=1e-6)
        assert var <= 1e-6

    def test_prior_reversion(self):
        cfg = _cfg(latent=(1.0, 1.0), individual=(0.5, 1.0), nugget=0.1)
        sc = stack_cluster([(np.array([1.5, 2.0, 4.0]), np.array([0.3, -0.2, 0.5]))])
        mean, var = gp_posterior_predict(sc, cfg, 200.0, None)
        assert mean == pytest.approx(0.0, abs=1e-6)
        assert var == pytest.approx(1.0 + 0.5 + 0.1, abs=1e-6)

    def test_two_point_conditional_gaussian(self):
        cfg = _cfg(latent=(1.2, 1.5), individual=(0.4, 0.8), nugget=0.05, jitter=0.0)
        t = np.array([1.5, 2.0])
        y = np.array([0.7, -0.3])
        sc = stack_cluster([(t, y)])
        s = 1.2 * np.exp(-0.5 * ((t[:, None] - t[None, :]) / 1.5) ** 2) \
            + 0.4 * np.exp(-0.5 * ((t[:, None] - t[None, :]) / 0.8) ** 2) + 0.05 * np.eye(2)
        k_star = 1.2 * np.exp(-0.5 * ((t - 4.0) / 1.5) ** 2) + 0.4 * np.exp(-0.5 * ((t - 4.0) / 0.8) ** 2)
        expected_mean = k_star @ np.linalg.solve(s, y)
        expected_var = 1.2 + 0.4 + 0.05 - k_star @ np.linalg.solve(s, k_star)
        mean, var = gp_posterior_predict(sc, cfg, 4.0, 0)
        assert mean == pytest.approx(expected_mean, abs=1e-10)
        assert var == pytest.approx(expected_var, abs=1e-10)

    def test_variance_non_increasing_with_more_points(self):
        rng = np.random.default_rng(29)
        cfg = _cfg(nugget=0.1)
        other = (np.array([1.5, 2.0, 4.0]), rng.normal(size=3))
        times = np.array([1.0, 2.0, 3.0, 4.0])
        values = rng.normal(size=4)
        previous = math.inf
        for m in range(1, 5):
            sc = stack_cluster([other, (times[:m], values[:m])])
            _, var = gp_posterior_predict(sc, cfg, 5.0, 1)
            assert var <= previous + 1e-9
            previous = var
