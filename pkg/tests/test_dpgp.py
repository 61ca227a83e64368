"""
Tests for the DP-GP mixture: CRP bookkeeping, the collapsed Gibbs sampler,
posterior-averaged prediction and grid search.

Acceptance-scale checks are marked ``slow``:
    pytest tests/test_dpgp.py -m slow -v -s
"""
import logging
import math

import numpy as np
import pytest
from pydantic import ValidationError
from scipy import stats

from traj_pipeline.core.config import settings
from traj_pipeline.core.errors import InvalidConfig, InvalidState
from traj_pipeline.core.seeding import derive_rng
from traj_pipeline.ingestion import SimulationConfig, Subject, TrajectoryDataset, simulate_cohort
from traj_pipeline.models.dpgp import (
    CollapsedGibbsSampler,
    CrpState,
    DpgpHyperParams,
    DpgpPosterior,
    adjusted_rand_index,
    crp_prior_weights,
    dpgp_predict,
    fit_dpgp,
    GridSearchConfig,
    gibbs_sweep,
    grid_search,
    joint_log_likelihood,
)
from traj_pipeline.models.kernels import gp_posterior_predict, log_marginal_likelihood, stack_cluster

logger = logging.getLogger(__name__)


def _hyper(alpha: float = 1.0, **overrides) -> DpgpHyperParams:
    flat = dict(
        latent_variance=1.0,
        latent_lengthscale=2.0,
        indiv_variance=0.1,
        indiv_lengthscale=2.0,
        nugget=0.05,
        alpha=alpha,
    )
    flat.update(overrides)
    return DpgpHyperParams.from_flat(**flat)


@pytest.fixture
def two_subjects() -> TrajectoryDataset:
    return TrajectoryDataset(subjects=[
        Subject.from_arrays("A", [1.5, 2.0, 4.0, 5.0], [0.4, 0.5, 0.9, 1.1]),
        Subject.from_arrays("B", [1.5, 2.0, 4.0], [0.1, 0.3, 1.2]),
    ])


@pytest.fixture
def separated_cohort():
    """Three flat, well-separated clusters with little noise."""
    cfg = SimulationConfig(
        n_subjects=30,
        n_clusters=3,
        cluster_mean_functions=[[-2.0, 0.0], [0.0, 0.0], [2.0, 0.0]],
        cluster_weights=[0.4, 0.3, 0.3],
        individual_noise_sd=0.1,
        individual_wiggle={"amplitude": 0.05, "lengthscale": 2.0},
        seed=12,
    )
    return simulate_cohort(cfg)


SEPARATED_HYPER = dict(
    latent_variance=4.0,
    latent_lengthscale=3.0,
    indiv_variance=0.0025,
    indiv_lengthscale=2.0,
    nugget=0.01,
)


# ---------------------------------------------------------------------------
# 1. CRP bookkeeping
# ---------------------------------------------------------------------------

class TestCrp:
    """Partition state and seating weights."""

    def test_empty_restaurant(self):
        state = CrpState(assignment=[None], cluster_sizes={}, next_cluster_id=0)
        ids, weights = crp_prior_weights(state, 0, alpha=1.0)
        assert ids == []
        assert weights.tolist() == [1.0]

    def test_direct_formula(self):
        state = CrpState(assignment=[0, 0, 0, 1, None], cluster_sizes={0: 3, 1: 1}, next_cluster_id=2)
        ids, weights = crp_prior_weights(state, 4, alpha=1.0)
        assert ids == [0, 1]
        np.testing.assert_allclose(weights, [0.6, 0.2, 0.2], atol=1e-15)
        assert math.fsum(weights) == pytest.approx(1.0, abs=1e-12)

    def test_monte_carlo_frequencies(self):
        state = CrpState(assignment=[0, 0, 0, 1, None], cluster_sizes={0: 3, 1: 1}, next_cluster_id=2)
        _, weights = crp_prior_weights(state, 4, alpha=1.0)
        n = 100_000
        draws = np.random.default_rng(0).choice(len(weights), size=n, p=weights)
        freq = np.bincount(draws, minlength=len(weights)) / n
        for p, f in zip(weights, freq):
            assert abs(f - p) < 4 * math.sqrt(p * (1 - p) / n)

    def test_inconsistent_sizes(self):
        state = CrpState(assignment=[0, 0, None], cluster_sizes={0: 5}, next_cluster_id=1)
        with pytest.raises(InvalidState):
            crp_prior_weights(state, 2, alpha=1.0)
        with pytest.raises(InvalidState):
            state.check()

    def test_assigned_subject_rejected(self):
        with pytest.raises(InvalidState):
            crp_prior_weights(CrpState.single_cluster(3), 0, alpha=1.0)

    def test_remove_deletes_empty_cluster(self):
        state = CrpState(assignment=[0, 1], cluster_sizes={0: 1, 1: 1}, next_cluster_id=2)
        assert state.remove(1) == 1
        assert state.cluster_sizes == {0: 1}
        assert state.add(1, None) == 2
        state.check()

    def test_joint_likelihood_relabel_invariant(self, two_subjects):
        hyper = _hyper()
        a = CrpState(assignment=[0, 1], cluster_sizes={0: 1, 1: 1}, next_cluster_id=2)
        b = CrpState(assignment=[5, 2], cluster_sizes={5: 1, 2: 1}, next_cluster_id=6)
        assert joint_log_likelihood(a, two_subjects, hyper) == pytest.approx(
            joint_log_likelihood(b, two_subjects, hyper), abs=1e-9
        )

    def test_joint_likelihood_single_subject_is_marginal(self):
        data = TrajectoryDataset(subjects=[Subject.from_arrays("A", [1.5, 2.0], [0.2, 0.1])])
        hyper = _hyper(alpha=2.5)
        lml = log_marginal_likelihood(stack_cluster(data.times_values()), hyper.cov)
        assert joint_log_likelihood(CrpState.single_cluster(1), data, hyper) == pytest.approx(lml, abs=1e-12)


# ---------------------------------------------------------------------------
# 2. Gibbs sampler
# ---------------------------------------------------------------------------

def _exact_together_probability(data: TrajectoryDataset, hyper: DpgpHyperParams) -> float:
    blocks = data.times_values()
    cov = hyper.cov
    log_together = math.log(1.0 / (1.0 + hyper.alpha)) + log_marginal_likelihood(stack_cluster(blocks), cov)
    log_apart = (
        math.log(hyper.alpha / (1.0 + hyper.alpha))
        + log_marginal_likelihood(stack_cluster(blocks[:1]), cov)
        + log_marginal_likelihood(stack_cluster(blocks[1:]), cov)
    )
    return 1.0 / (1.0 + math.exp(log_apart - log_together))


def _together_frequency_p_value(data: TrajectoryDataset, hyper: DpgpHyperParams, sweeps: int, seed: int) -> float:
    sampler = CollapsedGibbsSampler(data, hyper)
    rng = derive_rng(seed, "gibbs-check")
    state = CrpState.single_cluster(2)
    together = 0
    for _ in range(sweeps):
        state = sampler.sweep(state, rng)
        together += state.n_clusters == 1
    p = _exact_together_probability(data, hyper)
    result = stats.chisquare([together, sweeps - together], [p * sweeps, (1 - p) * sweeps])
    logger.info(f"seed {seed}: together {together}/{sweeps}, exact p={p:.4f}, chi-square p={result.pvalue:.4f}")
    return float(result.pvalue)


class TestGibbs:
    """Collapsed Gibbs sweeps over CRP partitions."""

    def test_single_subject(self):
        data = TrajectoryDataset(subjects=[Subject.from_arrays("A", [1.5, 2.0], [0.2, 0.1])])
        state = CrpState.single_cluster(1)
        rng = np.random.default_rng(0)
        for _ in range(5):
            state = gibbs_sweep(state, data, _hyper(), rng)
            assert state.n_clusters == 1
            state.check()

    def test_state_consistent_after_sweeps(self, separated_cohort):
        data, _ = separated_cohort
        state = CrpState.single_cluster(data.n_subjects)
        rng = np.random.default_rng(1)
        sampler = CollapsedGibbsSampler(data, _hyper(**SEPARATED_HYPER))
        for _ in range(5):
            state = sampler.sweep(state, rng)
            state.check()
            assert sum(state.cluster_sizes.values()) == data.n_subjects

    def test_updated_factors_match_fresh_marginals(self, separated_cohort):
        data, _ = separated_cohort
        hyper = _hyper(**SEPARATED_HYPER)
        sampler = CollapsedGibbsSampler(data, hyper)
        state = CrpState.single_cluster(data.n_subjects)
        rng = np.random.default_rng(6)
        for _ in range(3):
            state = sampler.sweep(state, rng)
        blocks = data.times_values()
        cached = sampler.cluster_log_marginals(state)
        for k, members in state.members().items():
            fresh = log_marginal_likelihood(stack_cluster([blocks[i] for i in members]), hyper.cov)
            assert cached[k] == pytest.approx(fresh, abs=1e-7)

    def test_vanishing_concentration_keeps_twins_together(self):
        values = [0.3, 0.5, 0.8]
        data = TrajectoryDataset(subjects=[
            Subject.from_arrays("A", [1.5, 2.0, 4.0], values),
            Subject.from_arrays("B", [1.5, 2.0, 4.0], values),
        ])
        sampler = CollapsedGibbsSampler(data, _hyper(alpha=1e-9))
        state = CrpState.single_cluster(2)
        state.remove(0)
        _, log_p = sampler.candidate_log_weights(state, 0)
        assert math.exp(log_p[-1]) < 1e-6

    def test_candidate_weights_normalized(self, two_subjects):
        sampler = CollapsedGibbsSampler(two_subjects, _hyper())
        state = CrpState.single_cluster(2)
        state.remove(1)
        ids, log_p = sampler.candidate_log_weights(state, 1)
        assert ids == [0]
        assert math.fsum(np.exp(log_p)) == pytest.approx(1.0, abs=1e-12)

    def test_two_subject_exact_posterior(self, two_subjects):
        assert _together_frequency_p_value(two_subjects, _hyper(), sweeps=3000, seed=0) > 0.001

    @pytest.mark.slow
    def test_two_subject_exact_posterior_all_seeds(self, two_subjects):
        for seed in range(5):
            assert _together_frequency_p_value(two_subjects, _hyper(), sweeps=10_000, seed=seed) > 0.001


# ---------------------------------------------------------------------------
# 3. Fitting
# ---------------------------------------------------------------------------

class TestFit:
    """fit_dpgp sample retention, reproducibility and recovery."""

    def test_one_retained_sample(self, two_subjects):
        post = fit_dpgp(two_subjects, _hyper(), sweeps=4, burnin=3, thin=1, rng=np.random.default_rng(0))
        assert len(post.samples) == 1
        assert len(post.joint_log_liks) == 1

    def test_retention_count(self, two_subjects):
        post = fit_dpgp(two_subjects, _hyper(), sweeps=20, burnin=5, thin=5, rng=np.random.default_rng(0))
        assert len(post.samples) == 3

    def test_single_subject_always_singleton(self):
        data = TrajectoryDataset(subjects=[Subject.from_arrays("A", [1.5], [0.2])])
        post = fit_dpgp(data, _hyper(), sweeps=6, burnin=1, thin=1, rng=np.random.default_rng(0))
        assert all(s.n_clusters == 1 for s in post.samples)
        assert post.map_partition() == {"A": 0}

    def test_default_hyper_follows_settings(self):
        assert DpgpHyperParams().to_flat() == {
            "latent_variance": settings.DPGP_LATENT_VARIANCE,
            "latent_lengthscale": settings.DPGP_LATENT_LENGTHSCALE,
            "indiv_variance": settings.DPGP_INDIV_VARIANCE,
            "indiv_lengthscale": settings.DPGP_INDIV_LENGTHSCALE,
            "nugget": settings.DPGP_NUGGET,
            "alpha": settings.DPGP_ALPHA,
        }

    @pytest.mark.parametrize("sweeps,burnin,thin", [(5, 5, 1), (5, -1, 1), (5, 1, 0)])
    def test_invalid_schedule(self, two_subjects, sweeps, burnin, thin):
        with pytest.raises(InvalidConfig):
            fit_dpgp(two_subjects, _hyper(), sweeps=sweeps, burnin=burnin, thin=thin)

    def test_reproducible(self, separated_cohort):
        data, _ = separated_cohort
        kwargs = dict(sweeps=8, burnin=2, thin=2)
        a = fit_dpgp(data, _hyper(**SEPARATED_HYPER), rng=derive_rng(3, "dpgp-fit"), **kwargs)
        b = fit_dpgp(data, _hyper(**SEPARATED_HYPER), rng=derive_rng(3, "dpgp-fit"), **kwargs)
        assert a.joint_log_liks == b.joint_log_liks
        assert [s.assignment for s in a.samples] == [s.assignment for s in b.samples]

    def test_map_is_highest_likelihood(self, separated_cohort):
        data, _ = separated_cohort
        post = fit_dpgp(data, _hyper(**SEPARATED_HYPER), sweeps=10, burnin=4, thin=2, rng=np.random.default_rng(4))
        assert post.joint_log_liks[post.map_index] == max(post.joint_log_liks)
        assert all(math.isfinite(x) for x in post.joint_log_liks)

    def test_recovers_separated_clusters(self, separated_cohort):
        data, labels = separated_cohort
        post = fit_dpgp(data, _hyper(**SEPARATED_HYPER), sweeps=40, burnin=20, thin=5, rng=derive_rng(0, "dpgp-fit"))
        found = post.map_partition()
        ari = adjusted_rand_index([labels[s] for s in data.subject_ids], [found[s] for s in data.subject_ids])
        logger.info(f"MAP has {post.samples[post.map_index].n_clusters} clusters, ARI {ari:.3f}")
        assert ari >= 0.9

    def test_summary_shape(self, two_subjects):
        post = fit_dpgp(two_subjects, _hyper(), sweeps=6, burnin=2, thin=2, rng=np.random.default_rng(0))
        summary = post.summary()
        assert set(summary) >= {"map_partition", "cluster_counts", "joint_log_liks", "hyper"}
        assert len(summary["cluster_counts"]) == len(post.samples)
        assert set(summary["map_partition"]) == {"A", "B"}

    @pytest.mark.slow
    def test_planted_recovery_acceptance(self):
        hits = 0
        for seed in range(10):
            data, labels = simulate_cohort(SimulationConfig(n_subjects=95, seed=seed))
            hyper = DpgpHyperParams.from_flat(
                latent_variance=2.0, latent_lengthscale=3.0,
                indiv_variance=0.04, indiv_lengthscale=2.0, nugget=0.0625, alpha=1.0,
            )
            post = fit_dpgp(data, hyper, sweeps=500, burnin=100, thin=5, rng=derive_rng(seed, "dpgp-fit"))
            found = post.map_partition()
            ari = adjusted_rand_index([labels[s] for s in data.subject_ids], [found[s] for s in data.subject_ids])
            logger.info(f"seed {seed}: ARI {ari:.3f}")
            hits += ari >= 0.9
        assert hits >= 8


# ---------------------------------------------------------------------------
# 4. Prediction and grid search
# ---------------------------------------------------------------------------

class TestPredictAndGrid:
    """Posterior-averaged prediction and hyperparameter grid search."""

    def test_single_partition_equals_gp_prediction(self, two_subjects):
        hyper = _hyper()
        post = DpgpPosterior(
            samples=[CrpState.single_cluster(2)] * 3,
            joint_log_liks=[0.0, 0.0, 0.0],
            hyper=hyper,
            map_index=0,
            subject_ids=two_subjects.subject_ids,
        )
        preds = dpgp_predict(post, two_subjects, [("B", 5.0), ("A", 6.0)])
        stacked = stack_cluster(two_subjects.times_values())
        expected_b, _ = gp_posterior_predict(stacked, hyper.cov, 5.0, 1)
        expected_a, _ = gp_posterior_predict(stacked, hyper.cov, 6.0, 0)
        assert preds[0] == pytest.approx(expected_b, abs=1e-12)
        assert preds[1] == pytest.approx(expected_a, abs=1e-12)

    def test_predictions_finite(self, separated_cohort):
        data, _ = separated_cohort
        post = fit_dpgp(data, _hyper(**SEPARATED_HYPER), sweeps=6, burnin=2, thin=2, rng=np.random.default_rng(2))
        preds = dpgp_predict(post, data, [(sid, 6.0) for sid in data.subject_ids[:5]])
        assert preds.shape == (5,)
        assert np.all(np.isfinite(preds))

    def test_predict_requires_fitted_subjects(self, two_subjects, separated_cohort):
        data, _ = separated_cohort
        post = fit_dpgp(two_subjects, _hyper(), sweeps=3, burnin=1, thin=1, rng=np.random.default_rng(0))
        with pytest.raises(ValueError):
            dpgp_predict(post, data, [(data.subject_ids[0], 6.0)])

    def test_grid_of_one(self, separated_cohort):
        data, _ = separated_cohort
        point = _hyper(**SEPARATED_HYPER)
        best, table = grid_search(data, [point], GridSearchConfig(sweeps=4, burnin=1, thin=1))
        assert best == point
        assert len(table) == 1
        assert math.isfinite(table[0].mean_rmse)

    def test_best_is_table_argmin(self, separated_cohort):
        data, _ = separated_cohort
        grid = [
            _hyper(**SEPARATED_HYPER),
            _hyper(**{**SEPARATED_HYPER, "nugget": 1.0}),
            _hyper(**{**SEPARATED_HYPER, "latent_lengthscale": 0.2}),
        ]
        cfg = GridSearchConfig(holdout_fraction=0.3, n_trials=2, seed=5, sweeps=4, burnin=1, thin=1)
        best, table = grid_search(data, grid, cfg)
        assert [row.index for row in table] == [0, 1, 2]
        scores = [row.mean_rmse for row in table]
        assert best == grid[int(np.argmin(scores))]

    def test_empty_grid(self, separated_cohort):
        data, _ = separated_cohort
        with pytest.raises(InvalidConfig):
            grid_search(data, [], GridSearchConfig())

    def test_grid_config_fills_sampler_settings(self):
        cfg = GridSearchConfig()
        assert (cfg.sweeps, cfg.burnin, cfg.thin) == (settings.DPGP_SWEEPS, settings.DPGP_BURNIN, settings.DPGP_THIN)

    def test_grid_config_rejects_sweeps_within_burnin(self):
        # burnin falls back to settings.DPGP_BURNIN, which 20 sweeps never clear
        with pytest.raises(ValidationError, match="sweeps > burnin"):
            GridSearchConfig(sweeps=20)
        with pytest.raises(ValidationError):
            GridSearchConfig(sweeps=5, burnin=5)

    def test_unrunnable_schedule_fails_before_scoring(self, separated_cohort, monkeypatch):
        data, _ = separated_cohort

        def _never_called(*args, **kwargs):
            raise AssertionError("grid point scored")

        monkeypatch.setattr("traj_pipeline.models.dpgp._score_grid_point", _never_called)
        cfg = GridSearchConfig.model_construct(holdout_fraction=0.3, n_trials=1, seed=0, sweeps=20, burnin=100, thin=1)
        with pytest.raises(InvalidConfig):
            grid_search(data, [_hyper(), _hyper(nugget=0.5)], cfg)

    def test_noiseless_prediction_interpolates_observations(self):
        data, _ = simulate_cohort(SimulationConfig(
            n_subjects=12, individual_noise_sd=0.0, individual_wiggle={"amplitude": 0.0}, seed=2,
        ))
        hyper = _hyper(latent_variance=2.0, latent_lengthscale=3.0, indiv_variance=0.25, nugget=0.0)
        post = fit_dpgp(data, hyper, sweeps=6, burnin=2, thin=2, rng=derive_rng(2, "dpgp-fit"))
        queries = [(s.id, float(s.times[k])) for s in data.subjects for k in (0, -1)]
        observed = [float(s.values[k]) for s in data.subjects for k in (0, -1)]
        preds = dpgp_predict(post, data, queries)
        assert np.max(np.abs(preds - observed)) < 1e-4

    @pytest.mark.slow
    def test_grid_search_ranks_generating_point_high(self):
        truth = DpgpHyperParams()
        flat = truth.to_flat()
        distorted = [
            DpgpHyperParams.from_flat(**{**flat, "indiv_variance": 25 * flat["indiv_variance"]}),
            DpgpHyperParams.from_flat(**{**flat, "nugget": 16 * flat["nugget"]}),
            DpgpHyperParams.from_flat(**{**flat, "latent_variance": 1e-3 * flat["latent_variance"]}),
            DpgpHyperParams.from_flat(**{**flat, "indiv_variance": 25 * flat["indiv_variance"],
                                         "indiv_lengthscale": 0.05 * flat["indiv_lengthscale"]}),
        ]
        hits = 0
        for seed in range(10):
            data, _ = simulate_cohort(SimulationConfig(seed=seed))
            cfg = GridSearchConfig(holdout_fraction=0.3, n_trials=2, seed=seed, sweeps=80, burnin=20, thin=5)
            _, table = grid_search(data, [truth, *distorted], cfg, jobs=5)
            rank = sorted(row.mean_rmse for row in table).index(table[0].mean_rmse)
            logger.info(f"seed {seed}: generating point ranks {rank + 1} of {len(table)}")
            hits += rank < 2
        assert hits >= 8

    def test_adjusted_rand_index_label_free(self):
        assert adjusted_rand_index([0, 0, 1, 1, 2], [2, 2, 0, 0, 1]) == pytest.approx(1.0)
        assert adjusted_rand_index([0, 0, 1, 1], [0, 1, 0, 1]) < 0.5
