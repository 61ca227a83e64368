"""
Latent class mixed model.

Subjects fall in one of G latent classes. Within class g a subject's
scores are a class-specific linear trend in age plus a correlated
within-subject process (none, autoregressive, or Brownian motion) plus iid
noise. Parameters are estimated by EM with random restarts and the number
of classes is chosen by BIC.
"""
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from enum import Enum
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize_scalar
from scipy.special import logsumexp
from sklearn.cluster import KMeans

from traj_pipeline.core.config import settings
from traj_pipeline.core.errors import DegenerateFit, InvalidConfig, TrajectoryError
from traj_pipeline.core.seeding import rng_seed
from traj_pipeline.ingestion.schemas import TrajectoryDataset
from traj_pipeline.models.kernels import LOG_2PI, cholesky_with_jitter

logger = logging.getLogger(__name__)

# Search box for covariance parameters, on the log scale
_LOG_VAR_BOUNDS = (math.log(1e-6), math.log(1e2))
_LOG_RATE_BOUNDS = (math.log(1e-3), math.log(1e2))


class CovKind(str, Enum):
    """Within-subject time-covariance structure."""

    NC = "nc"
    AR = "ar"
    BM = "bm"

    @classmethod
    def _missing_(cls, value):
        if isinstance(value, str):
            for member in cls:
                if member.value == value.lower():
                    return member
        return None

    @property
    def n_params(self) -> int:
        return {CovKind.NC: 0, CovKind.AR: 2, CovKind.BM: 1}[self]


class LcmmSpec(BaseModel):
    """Model definition: number of classes and covariance structure."""

    model_config = ConfigDict(frozen=True)

    n_classes: int = Field(..., ge=1, description="Number of latent classes G")
    cov_kind: CovKind = Field(CovKind.NC, description="Within-subject covariance structure")

    @property
    def label(self) -> str:
        """Short name such as ``NC3``."""
        return f"{self.cov_kind.value.upper()}{self.n_classes}"

    @property
    def n_params(self) -> int:
        # v (2 per class) + free class weights + covariance params + noise variance
        return 2 * self.n_classes + (self.n_classes - 1) + self.cov_kind.n_params + 1


class LcmmParams(BaseModel):
    """Candidate parameter values for one specification."""

    pi: list[float] = Field(..., min_length=1, description="Class probabilities")
    v: list[list[float]] = Field(..., description="Class (intercept, slope per year) effects, G x 2")
    w_params: list[float] = Field(default_factory=list,
                                  description="(sigma_w2, theta_w) for AR, (sigma_w2,) for BM, empty for NC")
    sigma_eps2: float = Field(..., gt=0, description="Measurement-noise variance")

    @model_validator(mode="after")
    def _check(self) -> "LcmmParams":
        if len(self.v) != len(self.pi) or any(len(row) != 2 for row in self.v):
            raise ValueError("v must be G x 2 with G = len(pi)")
        if any(p <= 0 for p in self.pi) or abs(math.fsum(self.pi) - 1.0) > 1e-10:
            raise ValueError(f"pi must be positive and sum to 1, got {self.pi}")
        if any(w <= 0 for w in self.w_params):
            raise ValueError("covariance parameters must be positive")
        return self

    @property
    def v_array(self) -> np.ndarray:
        return np.asarray(self.v, dtype=float)


class LcmmFit(LcmmParams):
    """Fitted LCMM with likelihood, BIC and subject class posteriors."""

    spec: LcmmSpec
    beta: list[float] = Field(default_factory=lambda: [0.0, 0.0],
                              description="Shared effects; constrained to 0 and absorbed into v")
    loglik: float
    n_params: int
    bic: float
    posteriors: dict[str, list[float]]
    loglik_trace: list[float]
    n_iterations: int
    converged: bool
    n_degenerate_restarts: int = 0

    def summary(self) -> dict:
        return self.model_dump(mode="json")


def design(times: np.ndarray) -> np.ndarray:
    """Per-subject fixed-effect design ``[1, t]``."""
    times = np.asarray(times, dtype=float)
    return np.column_stack([np.ones_like(times), times])


def process_cov(a: np.ndarray, b: np.ndarray, kind: CovKind, w_params: Sequence[float]) -> np.ndarray:
    """Covariance of the within-subject process w between age vectors ``a`` and ``b`` (no noise)."""
    a = np.asarray(a, dtype=float)[:, None]
    b = np.asarray(b, dtype=float)[None, :]
    kind = CovKind(kind)
    if kind is CovKind.NC:
        return np.zeros((a.shape[0], b.shape[1]))
    if kind is CovKind.AR:
        sigma_w2, theta_w = w_params
        return sigma_w2 * np.exp(-theta_w * np.abs(a - b))
    (sigma_w2,) = w_params
    return sigma_w2 * np.minimum(a, b)


def class_cov_matrix(times, kind: CovKind | str, w_params: Sequence[float], sigma_eps2: float) -> np.ndarray:
    """
    Within-subject covariance for one subject's ages.

    NC: σ_ε²·I. AR: σ_w²·exp(−θ_w|t_i−t_j|) + σ_ε²·I. BM: σ_w²·min(t_i,t_j) + σ_ε²·I.
    """
    times = np.asarray(times, dtype=float)
    cov = process_cov(times, times, CovKind(kind), w_params)
    cov[np.diag_indices_from(cov)] += sigma_eps2
    return cov


class _PatternGroup:
    """Subjects sharing one exact set of ages, stacked for vectorized algebra."""

    def __init__(self, rows: list[int], times: np.ndarray, values: np.ndarray):
        self.rows = np.asarray(rows, dtype=int)
        self.times = times
        self.design = design(times)
        self.values = values  # n_group x m


def _group_by_pattern(data: TrajectoryDataset) -> list[_PatternGroup]:
    patterns: dict[tuple[float, ...], list[int]] = {}
    blocks = data.times_values()
    for i, (t, _) in enumerate(blocks):
        patterns.setdefault(tuple(t), []).append(i)
    return [
        _PatternGroup(rows, np.asarray(key), np.vstack([blocks[i][1] for i in rows]))
        for key, rows in patterns.items()
    ]


def _chol(group: _PatternGroup, kind: CovKind, w_params, sigma_eps2: float) -> np.ndarray:
    chol, _ = cholesky_with_jitter(class_cov_matrix(group.times, kind, w_params, sigma_eps2), 0.0)
    return chol


def _class_log_densities(groups: list[_PatternGroup], n: int, kind: CovKind, params: LcmmParams) -> np.ndarray:
    """N x G matrix of log N(y_i | X_i v_g, Σ_i)."""
    v = params.v_array
    out = np.empty((n, len(params.pi)))
    for group in groups:
        chol = _chol(group, kind, params.w_params, params.sigma_eps2)
        m = len(group.times)
        const = -np.sum(np.log(np.diag(chol))) - 0.5 * m * LOG_2PI
        for g in range(len(params.pi)):
            resid = group.values - group.design @ v[g]
            z = solve_triangular(chol, resid.T, lower=True)
            out[group.rows, g] = -0.5 * np.sum(z * z, axis=0) + const
    return out


def lcmm_loglik(data: TrajectoryDataset, spec: LcmmSpec, params: LcmmParams) -> float:
    """
    Mixture log-likelihood Σ_i log Σ_g π_g N(y_i | X_i v_g, Σ_i).

    Raises:
        NotPositiveDefinite: If a class covariance cannot be factorized
    """
    log_dens = _class_log_densities(_group_by_pattern(data), data.n_subjects, spec.cov_kind, params)
    return float(np.sum(logsumexp(log_dens + np.log(params.pi), axis=1)))


def class_posteriors(params: LcmmParams, spec: LcmmSpec, times, values) -> np.ndarray:
    """Class-membership probabilities of one subject given its observations."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    chol, _ = cholesky_with_jitter(class_cov_matrix(times, spec.cov_kind, params.w_params, params.sigma_eps2), 0.0)
    x = design(times)
    log_w = np.log(params.pi).copy()
    const = -np.sum(np.log(np.diag(chol))) - 0.5 * len(times) * LOG_2PI
    for g, v_g in enumerate(params.v_array):
        z = solve_triangular(chol, values - x @ v_g, lower=True)
        log_w[g] += -0.5 * z @ z + const
    return np.exp(log_w - logsumexp(log_w))


class _EmRun:
    """One EM run from one initialization."""

    def __init__(self, data: TrajectoryDataset, spec: LcmmSpec):
        self.data = data
        self.spec = spec
        self.kind = spec.cov_kind
        self.n = data.n_subjects
        self.groups = _group_by_pattern(data)
        self.n_obs = data.n_observations

    # -- initialization -------------------------------------------------

    def initial_responsibilities(self, rng: np.random.Generator) -> np.ndarray:
        """Randomized k-means on per-subject OLS (intercept, slope), softened."""
        feats = []
        for t, y in self.data.times_values():
            if len(t) >= 2:
                slope, intercept = np.polyfit(t, y, 1)
            else:
                slope, intercept = 0.0, float(y[0])
            feats.append((intercept, slope))
        G = self.spec.n_classes
        if G == 1:
            return np.ones((self.n, 1))
        labels = KMeans(n_clusters=G, n_init=1, random_state=rng_seed(rng)).fit_predict(np.asarray(feats))
        return 0.9 * np.eye(G)[labels] + 0.1 / G

    def initial_cov_params(self) -> tuple[list[float], float]:
        var = float(np.var(np.concatenate([y for _, y in self.data.times_values()]))) or 1.0
        if self.kind is CovKind.AR:
            return [0.5 * var, 1.0], 0.5 * var
        if self.kind is CovKind.BM:
            return [0.1 * var], 0.5 * var
        return [], var

    # -- M-step ------------------------------------------------------------

    def _gls(self, r: np.ndarray, w_params, sigma_eps2: float) -> np.ndarray:
        G = r.shape[1]
        a = np.zeros((G, 2, 2))
        b = np.zeros((G, 2))
        for group in self.groups:
            chol = _chol(group, self.kind, w_params, sigma_eps2)
            w_x = cho_solve((chol, True), group.design)  # Σ⁻¹X
            xtwx = group.design.T @ w_x
            r_g = r[group.rows]  # n_group x G
            a += r_g.sum(axis=0)[:, None, None] * xtwx
            b += (w_x.T @ (group.values.T @ r_g)).T
        v = np.empty((G, 2))
        for g in range(G):
            try:
                v[g] = np.linalg.solve(a[g], b[g])
            except np.linalg.LinAlgError:
                v[g] = np.linalg.lstsq(a[g], b[g], rcond=None)[0]
        return v

    def _scatter(self, r: np.ndarray, v: np.ndarray) -> list[np.ndarray]:
        """Per-group responsibility-weighted residual scatter Σ_g Σ_i r_ig e_ig e_igᵀ."""
        out = []
        for group in self.groups:
            s = np.zeros((len(group.times), len(group.times)))
            for g in range(v.shape[0]):
                resid = group.values - group.design @ v[g]
                s += (resid * r[group.rows, g][:, None]).T @ resid
            out.append(s)
        return out

    def _expected_loglik(self, scatters: list[np.ndarray], w_params, sigma_eps2: float) -> float:
        total = 0.0
        for group, s in zip(self.groups, scatters):
            cov = class_cov_matrix(group.times, self.kind, w_params, sigma_eps2)
            try:
                chol, _ = cholesky_with_jitter(cov, 0.0)
            except TrajectoryError:
                return -math.inf
            m = len(group.times)
            trace = np.trace(cho_solve((chol, True), s))
            total += -0.5 * trace - len(group.rows) * (np.sum(np.log(np.diag(chol))) + 0.5 * m * LOG_2PI)
        return float(total)

    def _update_cov(self, r: np.ndarray, v: np.ndarray, w_params, sigma_eps2: float) -> tuple[list[float], float]:
        scatters = self._scatter(r, v)
        if self.kind is CovKind.NC:
            return [], float(sum(np.trace(s) for s in scatters) / self.n_obs)

        # coordinate ascent over log-parameters: [w_params..., sigma_eps2]
        theta = np.log(np.asarray(list(w_params) + [sigma_eps2], dtype=float))
        bounds = [_LOG_VAR_BOUNDS] + ([_LOG_RATE_BOUNDS] if self.kind is CovKind.AR else []) + [_LOG_VAR_BOUNDS]

        def objective(x: np.ndarray) -> float:
            p = np.exp(x)
            return -self._expected_loglik(scatters, list(p[:-1]), float(p[-1]))

        best = objective(theta)
        for _ in range(2):
            for c, (lo, hi) in enumerate(bounds):
                def along(value: float, c=c) -> float:
                    trial = theta.copy()
                    trial[c] = value
                    return objective(trial)

                res = minimize_scalar(along, bounds=(lo, hi), method="bounded", options={"xatol": 1e-7})
                if res.fun < best:
                    theta[c] = res.x
                    best = res.fun
        p = np.exp(theta)
        return [float(x) for x in p[:-1]], float(p[-1])

    def m_step(self, r: np.ndarray, w_params, sigma_eps2: float) -> LcmmParams:
        pi = r.mean(axis=0)
        pi = pi / pi.sum()
        v = self._gls(r, w_params, sigma_eps2)
        w_params, sigma_eps2 = self._update_cov(r, v, w_params, sigma_eps2)
        return LcmmParams(pi=list(pi), v=v.tolist(), w_params=w_params, sigma_eps2=sigma_eps2)

    # -- E-step / driver ---------------------------------------------------

    def e_step(self, params: LcmmParams) -> tuple[float, np.ndarray]:
        log_joint = _class_log_densities(self.groups, self.n, self.kind, params) + np.log(params.pi)
        norm = logsumexp(log_joint, axis=1)
        return float(np.sum(norm)), np.exp(log_joint - norm[:, None])

    def run(self, rng: np.random.Generator, tol: float, max_iters: int) -> tuple[LcmmParams, np.ndarray, list[float], bool]:
        r = self.initial_responsibilities(rng)
        w_params, sigma_eps2 = self.initial_cov_params()
        params = self.m_step(r, w_params, sigma_eps2)
        trace: list[float] = []
        converged = False
        floor = 1.0 / (10 * self.n)
        for it in range(1, max_iters + 1):
            ll, r = self.e_step(params)
            trace.append(ll)
            mass = r.mean(axis=0)
            if np.any(mass < floor):
                raise DegenerateFit(f"class mass {mass.min():.3g} below {floor:.3g} at iteration {it}")
            if len(trace) > 1:
                if trace[-1] < trace[-2] - 1e-8:
                    logger.warning(f"EM log-likelihood decreased by {trace[-2] - trace[-1]:.3g} at iteration {it}")
                if abs(trace[-1] - trace[-2]) < tol:
                    converged = True
                    break
            if it == max_iters:
                break
            params = self.m_step(r, params.w_params, params.sigma_eps2)
        return params, r, trace, converged


def bic_value(loglik: float, n_params: int, n_subjects: int) -> float:
    """``−2·loglik + n_params·log(n_subjects)``."""
    return -2.0 * loglik + n_params * math.log(n_subjects)


def bic(fit: LcmmFit, n_subjects: int) -> float:
    """BIC with the number of subjects as sample size."""
    return bic_value(fit.loglik, fit.n_params, n_subjects)


def em_fit(
    data: TrajectoryDataset,
    spec: LcmmSpec,
    n_starts: Optional[int] = None,
    tol: Optional[float] = None,
    max_iters: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> LcmmFit:
    """
    Fit an LCMM by EM, keeping the best of ``n_starts`` random initializations.

    Args:
        data: Cohort (at least ``spec.n_classes`` subjects)
        spec: Number of classes and covariance kind
        n_starts: Random restarts (defaults to settings.EM_N_STARTS)
        tol: Stop when the log-likelihood changes by less than this (defaults to settings.EM_TOL)
        max_iters: Iteration cap per run (defaults to settings.EM_MAX_ITERS)
        rng: Random generator

    Returns:
        LcmmFit of the highest-likelihood run

    Raises:
        InvalidConfig: Too few subjects or non-positive tolerance
        DegenerateFit: Every start collapsed a class
    """
    n_starts = settings.EM_N_STARTS if n_starts is None else n_starts
    tol = settings.EM_TOL if tol is None else tol
    max_iters = settings.EM_MAX_ITERS if max_iters is None else max_iters
    if data.n_subjects < spec.n_classes:
        raise InvalidConfig(f"{spec.label} needs at least {spec.n_classes} subjects, got {data.n_subjects}")
    if not tol > 0 or n_starts < 1 or max_iters < 1:
        raise InvalidConfig(f"need tol > 0, n_starts >= 1, max_iters >= 1 (got {tol}, {n_starts}, {max_iters})")
    if rng is None:
        rng = np.random.default_rng(0)

    run = _EmRun(data, spec)
    start_seeds = rng.integers(0, 2**63 - 1, size=n_starts)
    best = None
    degenerate = 0
    for s, seed in enumerate(start_seeds):
        try:
            params, r, trace, converged = run.run(np.random.default_rng(int(seed)), tol, max_iters)
        except DegenerateFit as e:
            degenerate += 1
            logger.warning(f"{spec.label} start {s} degenerate: {e}")
            continue
        if best is None or trace[-1] > best[2][-1]:
            best = (params, r, trace, converged)
    if best is None:
        raise DegenerateFit(f"all {n_starts} starts of {spec.label} were degenerate")

    params, r, trace, converged = best
    loglik = trace[-1]
    fit = LcmmFit(
        **params.model_dump(),
        spec=spec,
        loglik=loglik,
        n_params=spec.n_params,
        bic=bic_value(loglik, spec.n_params, data.n_subjects),
        posteriors={sid: list(map(float, row)) for sid, row in zip(data.subject_ids, r)},
        loglik_trace=trace,
        n_iterations=len(trace),
        converged=converged,
        n_degenerate_restarts=degenerate,
    )
    logger.info(
        f"Fitted {spec.label}: loglik {fit.loglik:.4f}, BIC {fit.bic:.4f}, "
        f"{fit.n_iterations} iterations, {degenerate}/{n_starts} degenerate starts"
    )
    return fit


def lcmm_predict(fit: LcmmFit, times, values, query_time: float) -> float:
    """
    Predict one subject's score at ``query_time`` from its observations.

    Class posteriors are recomputed from the observations; each class
    contributes its mean trend plus the conditional-Gaussian correction from
    the within-subject process, weighted by posterior probability.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    kind = fit.spec.cov_kind
    post = class_posteriors(fit, fit.spec, times, values)
    x = design(times)
    x_q = design(np.array([query_time]))[0]

    chol, _ = cholesky_with_jitter(class_cov_matrix(times, kind, fit.w_params, fit.sigma_eps2), 0.0)
    cross = process_cov(np.array([query_time]), times, kind, fit.w_params)[0]
    gain = cho_solve((chol, True), cross)
    preds = np.array([x_q @ v_g + gain @ (values - x @ v_g) for v_g in fit.v_array])
    return float(post @ preds)


class EmSettings(BaseModel):
    """EM controls; ``None`` falls back to Settings."""

    n_starts: Optional[int] = Field(None, ge=1)
    tol: Optional[float] = Field(None, gt=0)
    max_iters: Optional[int] = Field(None, ge=1)


class SelectionRow(BaseModel):
    spec: LcmmSpec
    bic: float
    loglik: Optional[float] = None
    n_params: int
    error: Optional[str] = None
    fit: Optional[LcmmFit] = None


class ModelSelection(BaseModel):
    """Outcome of BIC model selection over candidate specifications."""

    table: list[SelectionRow]
    per_family: dict[CovKind, LcmmSpec]
    best: LcmmSpec

    def fit_for(self, spec: LcmmSpec) -> Optional[LcmmFit]:
        for row in self.table:
            if row.spec == spec:
                return row.fit
        return None

    def summary(self) -> dict:
        return {
            "best": self.best.label,
            "per_family": {k.value: s.label for k, s in self.per_family.items()},
            "table": [
                {"model": row.spec.label, "bic": row.bic, "loglik": row.loglik,
                 "n_params": row.n_params, "error": row.error}
                for row in self.table
            ],
        }


def _fit_candidate(data: TrajectoryDataset, spec: LcmmSpec, em: EmSettings, seed: int) -> SelectionRow:
    try:
        fit = em_fit(data, spec, em.n_starts, em.tol, em.max_iters, np.random.default_rng(seed))
    except (TrajectoryError, ValueError, np.linalg.LinAlgError) as e:
        logger.warning(f"Candidate {spec.label} failed: {type(e).__name__}: {e}")
        return SelectionRow(spec=spec, bic=math.inf, n_params=spec.n_params, error=f"{type(e).__name__}: {e}")
    return SelectionRow(spec=spec, bic=fit.bic, loglik=fit.loglik, n_params=fit.n_params, fit=fit)


def select_model(
    data: TrajectoryDataset,
    candidates: Sequence[LcmmSpec],
    em: Optional[EmSettings] = None,
    rng: Optional[np.random.Generator] = None,
    jobs: Optional[int] = None,
) -> ModelSelection:
    """
    Fit every candidate and choose the lowest BIC within each covariance family and overall.

    Failed candidates are kept in the table with BIC = +inf. Ties go to the earlier candidate.
    """
    if not candidates:
        raise InvalidConfig("at least one candidate specification is required")
    em = em or EmSettings()
    jobs = settings.JOBS if jobs is None else jobs
    rng = rng if rng is not None else np.random.default_rng(0)
    seeds = [int(s) for s in rng.integers(0, 2**63 - 1, size=len(candidates))]

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            table = list(pool.map(_fit_candidate, [data] * len(candidates), candidates,
                                  [em] * len(candidates), seeds))
    else:
        table = [_fit_candidate(data, spec, em, seed) for spec, seed in zip(candidates, seeds)]

    def argmin(rows: list[SelectionRow]) -> SelectionRow:
        return rows[int(np.argmin([r.bic for r in rows]))]

    per_family: dict[CovKind, LcmmSpec] = {}
    for kind in CovKind:
        rows = [r for r in table if r.spec.cov_kind is kind]
        if rows:
            per_family[kind] = argmin(rows).spec
    best = argmin(table).spec
    logger.info(f"Model selection over {len(table)} candidates: best {best.label}")
    return ModelSelection(table=table, per_family=per_family, best=best)
