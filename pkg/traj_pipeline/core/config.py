from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Trajectory pipeline settings. Only used as fallback when explicit args aren't provided."""

    LOG_LEVEL: str = "INFO"

    # Covariance factorization
    JITTER: float = 1e-8
    MAX_JITTER: float = 1e-4

    # DP-GP sampler
    DPGP_SWEEPS: int = 500
    DPGP_BURNIN: int = 100
    DPGP_THIN: int = 5
    DPGP_ALPHA: float = 1.0

    # DP-GP kernels, matched to the default simulated cohort
    DPGP_LATENT_VARIANCE: float = 1.5
    DPGP_LATENT_LENGTHSCALE: float = 4.0
    DPGP_INDIV_VARIANCE: float = 0.04
    DPGP_INDIV_LENGTHSCALE: float = 2.0
    DPGP_NUGGET: float = 0.0625

    # LCMM EM
    EM_N_STARTS: int = 10
    EM_TOL: float = 1e-6
    EM_MAX_ITERS: int = 500

    # Evaluation
    JOBS: int = 1
    MAX_TRIAL_FAILURE_RATE: float = 0.2

    model_config = SettingsConfigDict(
        env_file=".env",
        env_prefix="TRAJ_",
        case_sensitive=True,
        extra="allow"
    )


settings = Settings()
