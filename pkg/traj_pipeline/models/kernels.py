"""
Covariance kernels and Gaussian-process algebra for the DP-GP model.

A cluster's covariance combines a latent-function kernel shared by every
subject in the cluster with an individual-deviation kernel that only acts
within a subject. Observation noise (the nugget) sits on the exact diagonal.
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.linalg import LinAlgError
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.linalg import cholesky, solve_triangular
from tenacity import Retrying, retry_if_exception_type, stop_after_attempt

from traj_pipeline.core.config import settings
from traj_pipeline.core.errors import NotPositiveDefinite

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


class KernelParams(BaseModel):
    """Squared-exponential kernel parameters."""

    model_config = ConfigDict(frozen=True, allow_inf_nan=False)

    variance: float = Field(1.0, ge=0, description="Signal variance (squared z-score units)")
    lengthscale: float = Field(1.0, gt=0, description="Lengthscale in years")


class ClusterCovConfig(BaseModel):
    """The kernel pair of a cluster plus noise and numerical stabilizer."""

    model_config = ConfigDict(frozen=True, allow_inf_nan=False)

    latent: KernelParams = Field(
        default_factory=lambda: KernelParams(
            variance=settings.DPGP_LATENT_VARIANCE, lengthscale=settings.DPGP_LATENT_LENGTHSCALE
        ),
        description="Kernel of the cluster's latent function",
    )
    individual: KernelParams = Field(
        default_factory=lambda: KernelParams(
            variance=settings.DPGP_INDIV_VARIANCE, lengthscale=settings.DPGP_INDIV_LENGTHSCALE
        ),
        description="Kernel of a subject's deviation",
    )
    nugget: float = Field(default_factory=lambda: settings.DPGP_NUGGET, ge=0, description="Observation-noise variance")
    jitter: float = Field(default_factory=lambda: settings.JITTER, ge=0, description="Diagonal stabilizer")


class StackedCluster(BaseModel):
    """Concatenated observations of the subjects in one cluster."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    y_hat: np.ndarray
    t_hat: np.ndarray
    owner: np.ndarray
    n_subjects: int = Field(..., ge=0)

    @model_validator(mode="after")
    def _check_blocks(self) -> "StackedCluster":
        if not (len(self.y_hat) == len(self.t_hat) == len(self.owner)):
            raise ValueError("y_hat, t_hat and owner must have equal length")
        if len(self.owner) == 0:
            if self.n_subjects != 0:
                raise ValueError("empty stack must have n_subjects=0")
            return self
        steps = np.diff(self.owner)
        if self.owner[0] != 0 or np.any((steps != 0) & (steps != 1)) or self.owner[-1] != self.n_subjects - 1:
            raise ValueError("owner indices must form contiguous blocks 0..n_subjects-1")
        return self

    @property
    def dim(self) -> int:
        return len(self.y_hat)


class CovMatrix(BaseModel):
    """Assembled cluster covariance with its lower Cholesky factor."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    matrix: np.ndarray
    chol: np.ndarray
    jitter: float = Field(..., description="Diagonal jitter actually used")


def se_kernel(t, t_prime, p: KernelParams):
    """Squared-exponential covariance ``σ²·exp(−(t−t')²/(2ℓ²))``; broadcasts over arrays."""
    r = (np.asarray(t, dtype=float) - np.asarray(t_prime, dtype=float)) / p.lengthscale
    k = p.variance * np.exp(-0.5 * r * r)
    return float(k) if np.ndim(k) == 0 else k


def se_matrix(a: np.ndarray, b: np.ndarray, p: KernelParams) -> np.ndarray:
    """Gram matrix of :func:`se_kernel` between time vectors ``a`` and ``b``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return se_kernel(a[:, None], b[None, :], p)


def compound_covariance(
    t: float,
    t_prime: float,
    n: int,
    n_prime: int,
    cfg: ClusterCovConfig,
    same_observation: bool = False,
) -> float:
    """
    Compound cluster covariance between observation (t, n) and (t', n').

    Args:
        t, t_prime: Ages in years
        n, n_prime: Subject indices within the cluster
        cfg: Cluster covariance configuration
        same_observation: True when both arguments denote one observation; adds the nugget

    Returns:
        ``k_f(t,t') + k_n(t,t')`` for the same subject, ``k_f(t,t')`` otherwise
    """
    k = se_kernel(t, t_prime, cfg.latent)
    if n == n_prime:
        k += se_kernel(t, t_prime, cfg.individual)
        if same_observation:
            k += cfg.nugget
    return float(k)


def compound_matrix(
    t_a: np.ndarray,
    owner_a: np.ndarray,
    t_b: np.ndarray,
    owner_b: np.ndarray,
    cfg: ClusterCovConfig,
) -> np.ndarray:
    """Vectorized :func:`compound_covariance` between two stacks (no nugget)."""
    k = se_matrix(t_a, t_b, cfg.latent)
    same = np.asarray(owner_a)[:, None] == np.asarray(owner_b)[None, :]
    return k + np.where(same, se_matrix(t_a, t_b, cfg.individual), 0.0)


def stack_cluster(blocks: Sequence[tuple[np.ndarray, np.ndarray]]) -> StackedCluster:
    """
    Stack per-subject (times, values) blocks into ŷ, t̂ and owner vectors.

    Args:
        blocks: One (times, values) pair per subject, in cluster order

    Returns:
        StackedCluster with owner indices 0..len(blocks)-1
    """
    if not blocks:
        empty = np.zeros(0)
        return StackedCluster(y_hat=empty, t_hat=empty, owner=np.zeros(0, dtype=int), n_subjects=0)
    t_hat = np.concatenate([np.asarray(t, dtype=float) for t, _ in blocks])
    y_hat = np.concatenate([np.asarray(y, dtype=float) for _, y in blocks])
    owner = np.concatenate([np.full(len(t), i, dtype=int) for i, (t, _) in enumerate(blocks)])
    return StackedCluster(y_hat=y_hat, t_hat=t_hat, owner=owner, n_subjects=len(blocks))


def _jitter_ladder(base: float, max_jitter: float) -> list[float]:
    ladder = [base]
    step = base * 10 if base > 0 else settings.JITTER
    while step <= max_jitter * (1 + 1e-9):
        ladder.append(step)
        step *= 10
    return ladder


def cholesky_with_jitter(
    matrix: np.ndarray,
    jitter: float,
    max_jitter: Optional[float] = None,
) -> tuple[np.ndarray, float]:
    """
    Lower Cholesky factor of ``matrix + jitter·I`` with ×10 jitter escalation.

    Args:
        matrix: Symmetric matrix without jitter
        jitter: First jitter to try
        max_jitter: Largest jitter allowed (defaults to settings.MAX_JITTER)

    Returns:
        (lower factor, jitter used)

    Raises:
        NotPositiveDefinite: If factorization fails at every rung up to ``max_jitter``
    """
    if max_jitter is None:
        max_jitter = settings.MAX_JITTER
    ladder = _jitter_ladder(jitter, max(max_jitter, jitter))
    eye = np.eye(matrix.shape[0])
    used = jitter
    chol = None
    try:
        for attempt in Retrying(
            stop=stop_after_attempt(len(ladder)),
            retry=retry_if_exception_type(LinAlgError),
            reraise=True,
        ):
            with attempt:
                used = ladder[attempt.retry_state.attempt_number - 1]
                if attempt.retry_state.attempt_number > 1:
                    logger.warning(f"Cholesky failed, escalating jitter to {used:g}")
                chol = cholesky(matrix + used * eye, lower=True)
    except LinAlgError as e:
        logger.error(f"Matrix of size {matrix.shape[0]} not positive definite at jitter {used:g}")
        raise NotPositiveDefinite(
            f"Cholesky factorization failed for a {matrix.shape[0]}x{matrix.shape[0]} matrix "
            f"even with jitter {used:g}"
        ) from e
    return chol, used


def gaussian_logpdf_chol(residual: np.ndarray, chol: np.ndarray) -> float:
    """log N(residual | 0, L Lᵀ) from the lower factor L, without forming an inverse."""
    if len(residual) == 0:
        return 0.0
    z = solve_triangular(chol, residual, lower=True)
    return float(-0.5 * z @ z - np.sum(np.log(np.diag(chol))) - 0.5 * len(residual) * LOG_2PI)


def assemble_cluster_cov(sc: StackedCluster, cfg: ClusterCovConfig) -> CovMatrix:
    """
    Build K̂ for a stacked cluster and factorize it.

    Entry (i, j) is the compound covariance of observations i and j, plus
    ``nugget + jitter`` on the diagonal.

    Raises:
        NotPositiveDefinite: If Cholesky fails even after jitter escalation
    """
    base = compound_matrix(sc.t_hat, sc.owner, sc.t_hat, sc.owner, cfg)
    base[np.diag_indices_from(base)] += cfg.nugget
    chol, used = cholesky_with_jitter(base, cfg.jitter)
    base[np.diag_indices_from(base)] += used
    return CovMatrix(matrix=base, chol=chol, jitter=used)


def log_marginal_likelihood(sc: StackedCluster, cfg: ClusterCovConfig) -> float:
    """
    Cluster marginal likelihood ``log N(ŷ | 0, K̂)`` via Cholesky.

    Returns:
        Log density; 0.0 for an empty cluster
    """
    if sc.dim == 0:
        return 0.0
    cov = assemble_cluster_cov(sc, cfg)
    return gaussian_logpdf_chol(sc.y_hat, cov.chol)


@dataclass(frozen=True)
class ClusterFactor:
    """
    A factorized cluster: cached Cholesky of K̂ and the whitened targets.

    Reused across Gibbs proposals and predictions so each cluster is
    factorized once per membership change.
    """

    stacked: StackedCluster
    cfg: ClusterCovConfig
    chol: np.ndarray
    whitened: np.ndarray
    jitter: float

    @classmethod
    def build(cls, stacked: StackedCluster, cfg: ClusterCovConfig) -> "ClusterFactor":
        if stacked.dim == 0:
            return cls(stacked, cfg, np.zeros((0, 0)), np.zeros(0), cfg.jitter)
        cov = assemble_cluster_cov(stacked, cfg)
        whitened = solve_triangular(cov.chol, stacked.y_hat, lower=True)
        return cls(stacked, cfg, cov.chol, whitened, cov.jitter)

    @property
    def log_marginal_likelihood(self) -> float:
        if self.stacked.dim == 0:
            return 0.0
        return float(
            -0.5 * self.whitened @ self.whitened
            - np.sum(np.log(np.diag(self.chol)))
            - 0.5 * self.stacked.dim * LOG_2PI
        )

    def predictive_logpdf(self, times: np.ndarray, values: np.ndarray) -> float:
        """
        log p(values | cluster data) for a subject joining this cluster.

        Equals ``log_marginal_likelihood(cluster ∪ subject) − log_marginal_likelihood(cluster)``.
        """
        times = np.asarray(times, dtype=float)
        values = np.asarray(values, dtype=float)
        self_cov = se_matrix(times, times, self.cfg.latent) + se_matrix(times, times, self.cfg.individual)
        self_cov[np.diag_indices_from(self_cov)] += self.cfg.nugget + self.jitter
        if self.stacked.dim == 0:
            chol, _ = cholesky_with_jitter(self_cov, 0.0)
            return gaussian_logpdf_chol(values, chol)
        cross = se_matrix(self.stacked.t_hat, times, self.cfg.latent)
        a = solve_triangular(self.chol, cross, lower=True)
        mean = a.T @ self.whitened
        cond = self_cov - a.T @ a
        cond = 0.5 * (cond + cond.T)
        chol, _ = cholesky_with_jitter(cond, 0.0)
        return gaussian_logpdf_chol(values - mean, chol)

    def without_subject(self, subject: int) -> "ClusterFactor":
        """
        Factor of this cluster with one subject's block removed, by block downdate.

        Only the trailing block after the removed rows is refactorized
        (``L33' L33'ᵀ = L33 L33ᵀ + L32 L32ᵀ``); the covariance is never reassembled.

        Args:
            subject: Owner index of the subject within this stack

        Raises:
            LinAlgError: If the trailing block loses positive definiteness
        """
        sc = self.stacked
        rows = np.flatnonzero(sc.owner == subject)
        if len(rows) == 0:
            raise ValueError(f"subject {subject} is not in this cluster")
        if sc.n_subjects == 1:
            return ClusterFactor.build(stack_cluster([]), self.cfg)
        i0, i1 = int(rows[0]), int(rows[-1]) + 1
        keep = np.r_[0:i0, i1:sc.dim]
        owner = sc.owner[keep]
        stacked = StackedCluster(
            y_hat=sc.y_hat[keep], t_hat=sc.t_hat[keep], owner=np.where(owner > subject, owner - 1, owner),
            n_subjects=sc.n_subjects - 1,
        )

        chol = self.chol[np.ix_(keep, keep)]
        whitened = self.whitened[keep]
        if i1 < sc.dim:
            l32 = self.chol[i1:, i0:i1]
            l33 = self.chol[i1:, i1:]
            trailing = cholesky(l33 @ l33.T + l32 @ l32.T, lower=True)
            chol[i0:, i0:] = trailing
            whitened[i0:] = solve_triangular(
                trailing, l32 @ self.whitened[i0:i1] + l33 @ self.whitened[i1:], lower=True
            )
        return ClusterFactor(stacked, self.cfg, chol, whitened, self.jitter)

    def with_subject(self, times: np.ndarray, values: np.ndarray) -> "ClusterFactor":
        """
        Factor of this cluster with a new subject appended as the last block.

        Extends the Cholesky factor by the subject's conditional block, the
        same quantities :meth:`predictive_logpdf` uses.

        Raises:
            LinAlgError: If the conditional block is not positive definite
        """
        times = np.asarray(times, dtype=float)
        values = np.asarray(values, dtype=float)
        sc = self.stacked
        if sc.dim == 0:
            return ClusterFactor.build(stack_cluster([(times, values)]), self.cfg)
        self_cov = se_matrix(times, times, self.cfg.latent) + se_matrix(times, times, self.cfg.individual)
        self_cov[np.diag_indices_from(self_cov)] += self.cfg.nugget + self.jitter
        a = solve_triangular(self.chol, se_matrix(sc.t_hat, times, self.cfg.latent), lower=True)
        cond = self_cov - a.T @ a
        block = cholesky(0.5 * (cond + cond.T), lower=True)

        d, b = sc.dim, len(times)
        chol = np.zeros((d + b, d + b))
        chol[:d, :d] = self.chol
        chol[d:, :d] = a.T
        chol[d:, d:] = block
        whitened = np.concatenate([self.whitened, solve_triangular(block, values - a.T @ self.whitened, lower=True)])
        stacked = StackedCluster(
            y_hat=np.concatenate([sc.y_hat, values]),
            t_hat=np.concatenate([sc.t_hat, times]),
            owner=np.concatenate([sc.owner, np.full(b, sc.n_subjects, dtype=int)]),
            n_subjects=sc.n_subjects + 1,
        )
        return ClusterFactor(stacked, self.cfg, chol, whitened, self.jitter)

    def predict(self, query_times: np.ndarray, query_subject: Optional[int]) -> tuple[np.ndarray, np.ndarray]:
        """
        Posterior mean and variance at ``query_times`` for one subject.

        Args:
            query_times: Ages to predict at
            query_subject: Index of a training subject in this stack, or None for a new subject

        Returns:
            (means, variances); variances clamped at 0
        """
        query_times = np.atleast_1d(np.asarray(query_times, dtype=float))
        prior_var = self.cfg.latent.variance + self.cfg.individual.variance + self.cfg.nugget
        if self.stacked.dim == 0:
            return np.zeros(len(query_times)), np.full(len(query_times), prior_var)
        owner_q = np.full(len(query_times), -1 if query_subject is None else query_subject)
        k_star = compound_matrix(self.stacked.t_hat, self.stacked.owner, query_times, owner_q, self.cfg)
        a = solve_triangular(self.chol, k_star, lower=True)
        mean = a.T @ self.whitened
        var = np.maximum(prior_var - np.sum(a * a, axis=0), 0.0)
        return mean, var


def gp_posterior_predict(
    train: StackedCluster,
    cfg: ClusterCovConfig,
    query_time: float,
    query_subject: Optional[int],
) -> tuple[float, float]:
    """
    GP conditional mean and variance for one (time, subject) query.

    Args:
        train: Stacked training cluster
        cfg: Cluster covariance configuration
        query_time: Age in years
        query_subject: Training subject index, or None for a new subject

    Returns:
        (mean, variance)
    """
    mean, var = ClusterFactor.build(train, cfg).predict(np.array([query_time]), query_subject)
    return float(mean[0]), float(var[0])
