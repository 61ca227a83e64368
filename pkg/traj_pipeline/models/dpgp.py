"""
Dirichlet-Process mixture of Gaussian processes.

Each cluster owns a latent GP trajectory; subjects are GP deviations around
it. The latent functions are integrated out, so inference is a collapsed
Gibbs sampler over the Chinese-restaurant-process partition alone.
"""
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from typing import Optional, Sequence

import numpy as np
from numpy.linalg import LinAlgError
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.special import gammaln, logsumexp
from sklearn.metrics import adjusted_rand_score

from traj_pipeline.core.config import settings
from traj_pipeline.core.errors import InvalidConfig, InvalidState, NumericalFailure, TrajectoryError
from traj_pipeline.core.seeding import derive_rng
from traj_pipeline.ingestion.schemas import TrajectoryDataset
from traj_pipeline.models.kernels import ClusterCovConfig, ClusterFactor, KernelParams, stack_cluster

logger = logging.getLogger(__name__)


class DpgpHyperParams(BaseModel):
    """Kernel parameters shared by all clusters plus the CRP concentration."""

    model_config = ConfigDict(frozen=True, allow_inf_nan=False)

    cov: ClusterCovConfig = Field(default_factory=ClusterCovConfig)
    alpha: float = Field(default_factory=lambda: settings.DPGP_ALPHA, gt=0, description="CRP concentration")

    @classmethod
    def from_flat(
        cls,
        latent_variance: float,
        latent_lengthscale: float,
        indiv_variance: float,
        indiv_lengthscale: float,
        nugget: float,
        alpha: float,
        jitter: Optional[float] = None,
    ) -> "DpgpHyperParams":
        """Build from the flat keys used by grid files and CLI flags."""
        cov_kwargs = {} if jitter is None else {"jitter": jitter}
        return cls(
            cov=ClusterCovConfig(
                latent=KernelParams(variance=latent_variance, lengthscale=latent_lengthscale),
                individual=KernelParams(variance=indiv_variance, lengthscale=indiv_lengthscale),
                nugget=nugget,
                **cov_kwargs,
            ),
            alpha=alpha,
        )

    def to_flat(self) -> dict[str, float]:
        return {
            "latent_variance": self.cov.latent.variance,
            "latent_lengthscale": self.cov.latent.lengthscale,
            "indiv_variance": self.cov.individual.variance,
            "indiv_lengthscale": self.cov.individual.lengthscale,
            "nugget": self.cov.nugget,
            "alpha": self.alpha,
        }


class CrpState(BaseModel):
    """A partition of subjects into clusters; ``None`` marks a subject currently held out."""

    assignment: list[Optional[int]] = Field(..., description="Subject index -> cluster id")
    cluster_sizes: dict[int, int] = Field(default_factory=dict, description="Cluster id -> member count")
    next_cluster_id: int = Field(0, ge=0)

    @classmethod
    def single_cluster(cls, n_subjects: int) -> "CrpState":
        return cls(assignment=[0] * n_subjects, cluster_sizes={0: n_subjects}, next_cluster_id=1)

    @property
    def n_clusters(self) -> int:
        return len(self.cluster_sizes)

    @property
    def n_assigned(self) -> int:
        return sum(1 for a in self.assignment if a is not None)

    def check(self) -> None:
        """Raise InvalidState unless sizes, assignment and counter agree."""
        counts: dict[int, int] = {}
        for a in self.assignment:
            if a is not None:
                counts[a] = counts.get(a, 0) + 1
        if counts != self.cluster_sizes:
            raise InvalidState(f"cluster sizes {self.cluster_sizes} disagree with assignment counts {counts}")
        if any(size < 1 for size in self.cluster_sizes.values()):
            raise InvalidState("empty cluster present")
        if self.cluster_sizes and max(self.cluster_sizes) >= self.next_cluster_id:
            raise InvalidState("next_cluster_id is not above every cluster id")

    def remove(self, subject: int) -> int:
        """Unassign ``subject``; an emptied cluster is deleted. Returns its former cluster."""
        k = self.assignment[subject]
        if k is None:
            raise InvalidState(f"subject {subject} is already unassigned")
        self.assignment[subject] = None
        self.cluster_sizes[k] -= 1
        if self.cluster_sizes[k] == 0:
            del self.cluster_sizes[k]
        return k

    def add(self, subject: int, cluster: Optional[int]) -> int:
        """Assign ``subject`` to ``cluster`` (``None`` opens a new cluster). Returns the cluster id."""
        if self.assignment[subject] is not None:
            raise InvalidState(f"subject {subject} is already assigned")
        if cluster is None:
            cluster = self.next_cluster_id
            self.next_cluster_id += 1
        self.assignment[subject] = cluster
        self.cluster_sizes[cluster] = self.cluster_sizes.get(cluster, 0) + 1
        return cluster

    def members(self) -> dict[int, tuple[int, ...]]:
        """Cluster id -> sorted member indices."""
        out: dict[int, list[int]] = {}
        for i, a in enumerate(self.assignment):
            if a is not None:
                out.setdefault(a, []).append(i)
        return {k: tuple(v) for k, v in sorted(out.items())}

    def canonical_labels(self) -> list[int]:
        """Cluster labels renumbered 0, 1, ... by first appearance."""
        relabel: dict[int, int] = {}
        return [relabel.setdefault(a, len(relabel)) for a in self.assignment]


class DpgpPosterior(BaseModel):
    """Retained Gibbs samples with their joint log-likelihoods."""

    samples: list[CrpState] = Field(..., min_length=1)
    joint_log_liks: list[float]
    hyper: DpgpHyperParams
    map_index: int = Field(..., ge=0)
    subject_ids: list[str]

    def map_partition(self) -> dict[str, int]:
        labels = self.samples[self.map_index].canonical_labels()
        return dict(zip(self.subject_ids, labels))

    def summary(self) -> dict:
        """JSON-ready posterior summary."""
        return {
            "hyper": self.hyper.to_flat(),
            "n_samples": len(self.samples),
            "map_index": self.map_index,
            "map_partition": self.map_partition(),
            "cluster_counts": [s.n_clusters for s in self.samples],
            "joint_log_liks": self.joint_log_liks,
        }


def crp_prior_weights(state: CrpState, subject: int, alpha: float) -> tuple[list[int], np.ndarray]:
    """
    CRP seating probabilities for an unassigned subject.

    Args:
        state: Current partition with ``subject`` held out
        subject: Index of the unassigned subject
        alpha: Concentration

    Returns:
        (existing cluster ids in sorted order, weights) where the final weight is the new cluster

    Raises:
        InvalidState: If ``subject`` is assigned or the sizes are inconsistent
    """
    if state.assignment[subject] is not None:
        raise InvalidState(f"subject {subject} must be unassigned")
    m = state.n_assigned
    if sum(state.cluster_sizes.values()) != m or any(s < 1 for s in state.cluster_sizes.values()):
        raise InvalidState(f"cluster sizes {state.cluster_sizes} inconsistent with {m} assigned subjects")
    ids = sorted(state.cluster_sizes)
    denom = m + alpha
    weights = np.array([state.cluster_sizes[k] / denom for k in ids] + [alpha / denom])
    return ids, weights


class CollapsedGibbsSampler:
    """Collapsed Gibbs sampler over CRP partitions with per-cluster factor caching."""

    def __init__(self, data: TrajectoryDataset, hyper: DpgpHyperParams):
        self.hyper = hyper
        self.blocks = data.times_values()
        self.n_subjects = len(self.blocks)
        # cluster id -> (subjects in stack order, factor); validated against current members on every read
        self._cache: dict[int, tuple[tuple[int, ...], ClusterFactor]] = {}
        self._singleton: dict[int, float] = {}

    def _factor(self, cluster: int, members: tuple[int, ...]) -> ClusterFactor:
        cached = self._cache.get(cluster)
        if cached is not None and tuple(sorted(cached[0])) == members:
            return cached[1]
        factor = ClusterFactor.build(stack_cluster([self.blocks[i] for i in members]), self.hyper.cov)
        self._cache[cluster] = (members, factor)
        return factor

    def _leave(self, cluster: int, subject: int) -> None:
        """Downdate the cached factor of ``cluster`` after ``subject`` left it."""
        cached = self._cache.pop(cluster, None)
        if cached is None or subject not in cached[0] or len(cached[0]) == 1:
            return
        order, factor = cached
        try:
            factor = factor.without_subject(order.index(subject))
        except LinAlgError:
            logger.debug(f"Downdate of cluster {cluster} failed; refactorizing on next use")
            return
        self._cache[cluster] = (tuple(i for i in order if i != subject), factor)

    def _join(self, cluster: int, subject: int) -> None:
        """Append ``subject`` to the cached factor of ``cluster``, if there is one."""
        cached = self._cache.pop(cluster, None)
        if cached is None:
            return
        order, factor = cached
        try:
            factor = factor.with_subject(*self.blocks[subject])
        except LinAlgError:
            logger.debug(f"Update of cluster {cluster} failed; refactorizing on next use")
            return
        self._cache[cluster] = (order + (subject,), factor)

    def _singleton_logpdf(self, subject: int) -> float:
        if subject not in self._singleton:
            empty = ClusterFactor.build(stack_cluster([]), self.hyper.cov)
            self._singleton[subject] = empty.predictive_logpdf(*self.blocks[subject])
        return self._singleton[subject]

    def candidate_log_weights(self, state: CrpState, subject: int) -> tuple[list[int], np.ndarray]:
        """
        Normalized log-probabilities of seating ``subject`` at each existing cluster or a new one.

        Raises:
            NumericalFailure: If every candidate has zero probability
        """
        ids, prior = crp_prior_weights(state, subject, self.hyper.alpha)
        members = state.members()
        times, values = self.blocks[subject]
        with np.errstate(divide="ignore"):
            log_w = np.log(prior)
        for j, k in enumerate(ids):
            log_w[j] += self._factor(k, members[k]).predictive_logpdf(times, values)
        log_w[-1] += self._singleton_logpdf(subject)
        if not np.any(np.isfinite(log_w)) or np.any(np.isnan(log_w)):
            raise NumericalFailure(f"no finite seating weight for subject {subject}: {log_w}")
        return ids, log_w - logsumexp(log_w)

    def sweep(self, state: CrpState, rng: np.random.Generator) -> CrpState:
        """
        One Gibbs pass reassigning every subject in index order; returns a new state.

        Cached cluster factors follow each move by block downdate and append, and
        are refactorized from scratch at the start of every sweep.
        """
        state = state.model_copy(deep=True)
        self._cache.clear()
        for i in range(self.n_subjects):
            old = state.assignment[i]
            stash = self._cache.get(old)
            state.remove(i)
            self._leave(old, i)
            ids, log_p = self.candidate_log_weights(state, i)
            p = np.exp(log_p)
            j = int(rng.choice(len(p), p=p / p.sum()))
            new = state.add(i, ids[j] if j < len(ids) else None)
            if new == old and stash is not None:
                self._cache[new] = stash
            else:
                self._join(new, i)
        return state

    def cluster_log_marginals(self, state: CrpState) -> dict[int, float]:
        return {k: self._factor(k, m).log_marginal_likelihood for k, m in state.members().items()}

    def joint_log_likelihood(self, state: CrpState) -> float:
        alpha = self.hyper.alpha
        sizes = np.array(list(state.cluster_sizes.values()), dtype=float)
        n = sizes.sum()
        log_prior = (
            len(sizes) * math.log(alpha)
            + gammaln(alpha)
            - gammaln(alpha + n)
            + float(np.sum(gammaln(sizes)))
        )
        return float(log_prior + math.fsum(self.cluster_log_marginals(state).values()))


def gibbs_sweep(
    state: CrpState,
    data: TrajectoryDataset,
    hyper: DpgpHyperParams,
    rng: np.random.Generator,
) -> CrpState:
    """
    One collapsed Gibbs sweep.

    Each subject in turn is removed and reseated with probability proportional
    to its CRP prior weight times exp(Δ log marginal likelihood).
    """
    state.check()
    return CollapsedGibbsSampler(data, hyper).sweep(state, rng)


def joint_log_likelihood(state: CrpState, data: TrajectoryDataset, hyper: DpgpHyperParams) -> float:
    """CRP partition log-prior plus the sum of cluster marginal log-likelihoods."""
    return CollapsedGibbsSampler(data, hyper).joint_log_likelihood(state)


def sampler_schedule(
    sweeps: Optional[int] = None, burnin: Optional[int] = None, thin: Optional[int] = None
) -> tuple[int, int, int]:
    """Fill unset sampler lengths from settings; raises InvalidConfig unless sweeps > burnin >= 0 and thin >= 1."""
    sweeps = settings.DPGP_SWEEPS if sweeps is None else sweeps
    burnin = settings.DPGP_BURNIN if burnin is None else burnin
    thin = settings.DPGP_THIN if thin is None else thin
    if not (sweeps > burnin >= 0) or thin < 1:
        raise InvalidConfig(f"need sweeps > burnin >= 0 and thin >= 1 (got {sweeps}, {burnin}, {thin})")
    return sweeps, burnin, thin


def fit_dpgp(
    data: TrajectoryDataset,
    hyper: DpgpHyperParams,
    sweeps: Optional[int] = None,
    burnin: Optional[int] = None,
    thin: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> DpgpPosterior:
    """
    Run the collapsed Gibbs sampler from the one-cluster partition.

    Args:
        data: Training cohort
        hyper: Shared kernel parameters and concentration
        sweeps: Total sweeps (defaults to settings.DPGP_SWEEPS)
        burnin: Discarded leading sweeps (defaults to settings.DPGP_BURNIN)
        thin: Keep every thin-th post-burn-in sweep (defaults to settings.DPGP_THIN)
        rng: Random generator (defaults to a stream derived from seed 0)

    Returns:
        DpgpPosterior with retained partitions and joint log-likelihoods

    Raises:
        InvalidConfig: If sweeps <= burnin, burnin < 0 or thin < 1
    """
    sweeps, burnin, thin = sampler_schedule(sweeps, burnin, thin)
    if rng is None:
        rng = derive_rng(0, "dpgp-fit")

    sampler = CollapsedGibbsSampler(data, hyper)
    state = CrpState.single_cluster(data.n_subjects)
    samples: list[CrpState] = []
    lls: list[float] = []
    logger.info(f"Starting DP-GP Gibbs: {data.n_subjects} subjects, {sweeps} sweeps, burnin {burnin}, thin {thin}")
    for s in range(1, sweeps + 1):
        state = sampler.sweep(state, rng)
        if s > burnin and (s - burnin) % thin == 0:
            samples.append(state)
            lls.append(sampler.joint_log_likelihood(state))
        if s % 100 == 0:
            logger.debug(f"Sweep {s}/{sweeps}: {state.n_clusters} clusters")

    map_index = int(np.argmax(lls))
    logger.info(
        f"DP-GP finished: {len(samples)} samples retained, MAP has "
        f"{samples[map_index].n_clusters} clusters (joint log-lik {lls[map_index]:.4f})"
    )
    return DpgpPosterior(
        samples=samples,
        joint_log_liks=lls,
        hyper=hyper,
        map_index=map_index,
        subject_ids=data.subject_ids,
    )


def dpgp_predict(
    post: DpgpPosterior,
    data: TrajectoryDataset,
    queries: Sequence[tuple[str, float]],
) -> np.ndarray:
    """
    Posterior-averaged predictions for (subject id, age) queries.

    For each retained partition the query subject's cluster is conditioned on
    and the GP posterior mean is taken; the final value averages over samples.

    Args:
        post: Fitted posterior
        data: The training cohort the posterior was fitted on
        queries: (subject id, age) pairs; every subject must be in ``data``

    Returns:
        Array of predicted means, one per query
    """
    if data.subject_ids != post.subject_ids:
        raise ValueError("prediction data must contain the fitted subjects in the fitted order")
    blocks = data.times_values()
    index = {sid: i for i, sid in enumerate(data.subject_ids)}
    rows = [index[sid] for sid, _ in queries]
    times = np.array([t for _, t in queries], dtype=float)

    factors: dict[tuple[int, ...], ClusterFactor] = {}
    total = np.zeros(len(queries))
    for sample in post.samples:
        members = sample.members()
        for q, (i, t) in enumerate(zip(rows, times)):
            cluster = members[sample.assignment[i]]
            if cluster not in factors:
                factors[cluster] = ClusterFactor.build(stack_cluster([blocks[m] for m in cluster]), post.hyper.cov)
            mean, _ = factors[cluster].predict(np.array([t]), cluster.index(i))
            total[q] += mean[0]
    preds = total / len(post.samples)
    if not np.all(np.isfinite(preds)):
        raise NumericalFailure("non-finite DP-GP prediction")
    return preds


def adjusted_rand_index(labels_a: Sequence[int], labels_b: Sequence[int]) -> float:
    """Chance-corrected agreement between two labelings of the same subjects."""
    return float(adjusted_rand_score(list(labels_a), list(labels_b)))


class GridSearchConfig(BaseModel):
    """Hold-out protocol and sampler settings used to score each grid point."""

    holdout_fraction: float = Field(0.3, ge=0, lt=1)
    n_trials: int = Field(1, ge=1)
    seed: int = 0
    sweeps: Optional[int] = Field(None, ge=1)
    burnin: Optional[int] = Field(None, ge=0)
    thin: Optional[int] = Field(None, ge=1)

    @model_validator(mode="after")
    def _fill_schedule(self) -> "GridSearchConfig":
        self.sweeps, self.burnin, self.thin = sampler_schedule(self.sweeps, self.burnin, self.thin)
        return self


class GridPointScore(BaseModel):
    index: int
    hyper: DpgpHyperParams
    mean_rmse: float


def _score_grid_point(data: TrajectoryDataset, hyper: DpgpHyperParams, index: int, cfg: GridSearchConfig) -> float:
    from traj_pipeline.evaluation.metrics import rmse
    from traj_pipeline.evaluation.splits import make_holdout_split

    scores = []
    try:
        for trial in range(cfg.n_trials):
            split = make_holdout_split(data, cfg.holdout_fraction, derive_rng(cfg.seed, "grid-split", trial))
            post = fit_dpgp(split.train, hyper, cfg.sweeps, cfg.burnin, cfg.thin,
                            derive_rng(cfg.seed, "grid-fit", trial))
            preds = dpgp_predict(post, split.train, [(sid, t) for sid, t, _ in split.heldout])
            scores.append(rmse(preds, [y for _, _, y in split.heldout]))
    except InvalidConfig:
        raise
    except (TrajectoryError, ValueError, np.linalg.LinAlgError) as e:
        logger.warning(f"Grid point {index} ({hyper.to_flat()}) failed: {type(e).__name__}: {e}")
        return math.inf
    return float(np.mean(scores))


def grid_search(
    data: TrajectoryDataset,
    grid: Sequence[DpgpHyperParams],
    eval_cfg: GridSearchConfig,
    jobs: Optional[int] = None,
) -> tuple[DpgpHyperParams, list[GridPointScore]]:
    """
    Pick hyperparameters by held-out RMSE.

    Every grid point is scored on the same derived splits and sampler streams.

    Args:
        data: Cohort
        grid: Candidate hyperparameters (non-empty)
        eval_cfg: Hold-out fraction, trial count, seed and sampler settings
        jobs: Worker processes (defaults to settings.JOBS)

    Returns:
        (best hyperparameters, per-point mean RMSE table in grid order); ties go to the earliest point

    Raises:
        InvalidConfig: Empty grid, or a sampler schedule no grid point could run
    """
    if not grid:
        raise InvalidConfig("grid must contain at least one point")
    sampler_schedule(eval_cfg.sweeps, eval_cfg.burnin, eval_cfg.thin)
    jobs = settings.JOBS if jobs is None else jobs
    indices = list(range(len(grid)))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            scores = list(pool.map(_score_grid_point, [data] * len(grid), grid, indices, [eval_cfg] * len(grid)))
    else:
        scores = [_score_grid_point(data, hyper, i, eval_cfg) for i, hyper in zip(indices, grid)]

    table = [GridPointScore(index=i, hyper=h, mean_rmse=s) for i, h, s in zip(indices, grid, scores)]
    best = int(np.argmin(scores))
    if not math.isfinite(scores[best]):
        logger.warning("Every grid point failed; returning the first")
    logger.info(f"Grid search best point {best} with mean RMSE {scores[best]:.6f}")
    return grid[best], table
