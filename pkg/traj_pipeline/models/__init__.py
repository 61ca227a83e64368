"""
Models Layer

GP covariance algebra, the DP-GP mixture and the latent class mixed model.
"""
from traj_pipeline.models.kernels import (
    KernelParams,
    ClusterCovConfig,
    ClusterFactor,
    se_kernel,
    compound_covariance,
    stack_cluster,
    assemble_cluster_cov,
    log_marginal_likelihood,
    gp_posterior_predict,
)
from traj_pipeline.models.dpgp import (
    DpgpHyperParams,
    CrpState,
    DpgpPosterior,
    gibbs_sweep,
    joint_log_likelihood,
    fit_dpgp,
    dpgp_predict,
    grid_search,
    adjusted_rand_index,
)
from traj_pipeline.models.lcmm import (
    CovKind,
    LcmmSpec,
    LcmmParams,
    LcmmFit,
    EmSettings,
    ModelSelection,
    lcmm_loglik,
    em_fit,
    bic,
    lcmm_predict,
    select_model,
)

__all__ = [
    "KernelParams",
    "ClusterCovConfig",
    "ClusterFactor",
    "se_kernel",
    "compound_covariance",
    "stack_cluster",
    "assemble_cluster_cov",
    "log_marginal_likelihood",
    "gp_posterior_predict",
    "DpgpHyperParams",
    "CrpState",
    "DpgpPosterior",
    "gibbs_sweep",
    "joint_log_likelihood",
    "fit_dpgp",
    "dpgp_predict",
    "grid_search",
    "adjusted_rand_index",
    "CovKind",
    "LcmmSpec",
    "LcmmParams",
    "LcmmFit",
    "EmSettings",
    "ModelSelection",
    "lcmm_loglik",
    "em_fit",
    "bic",
    "lcmm_predict",
    "select_model",
]
