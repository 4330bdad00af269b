"""Cluster-weighted GLM estimation with variance-targeted dispersion choice.

The central objects are quasi-likelihood estimators of fixed effects in
clustered generalized linear models, weighted by a parametric working
covariance.  The working dispersion can be chosen by minimizing a
finite-sample leave-one-cluster-out estimate of the estimator's own
variance ("sandwich regression"), by its large-sample plug-in analogue, or
by the classical Gaussian pseudo-likelihood (EQML) and Pearson
cross-product (GEE) criteria.  Jackknife standard errors that account for
dispersion re-estimation, variance-based model selection, seeded
simulation generators and a quadrature study of a heteroscedastic
counterexample round out the package.
"""

__version__ = "0.1.0"

from .covariance import (
    CovarianceStructure,
    ar1,
    arma,
    arma_autocovariance,
    build_correlation,
    exchangeable,
    independence,
    pack_params,
    random_effects,
    random_effects_cov,
    two_piece,
    unpack_params,
    weight_matrix,
)
from .data import ClusterData, ClusterDataset
from .errors import (
    ConfigError,
    ConvergenceError,
    DataError,
    DegenerateMeanError,
    IntegrationError,
    LeverageError,
    RankDeficiencyError,
    SandregError,
    StructureError,
)
from .families import (
    GlmFamily,
    binomial,
    custom_family,
    family_by_name,
    gaussian,
    mean_jacobian,
    mean_vector,
    poisson,
    variance_diag,
)
from .inference import (
    ModelCandidate,
    VarianceEstimate,
    delta_method_variance,
    jackknife_variance,
    select_model,
)
from .objectives import (
    DispersionObjective,
    OptimizerSettings,
    SandregFit,
    eqml_objective,
    gaussian_aic,
    gee_objective,
    minimize_dispersion,
)
from .qml import (
    QmlSolution,
    estimating_equation,
    fisher_scoring,
    solve_wls,
    solve_wls_weighted,
)
from .sandwich_loss import (
    LooCache,
    LossValue,
    build_loo_cache,
    large_sample_sandwich_loss,
    loo_beta,
    sandwich_loss,
)
from .simulate import (
    DgpSpec,
    MethodSpec,
    MseReport,
    gen_binomial_copula,
    gen_linear_multilevel,
    gen_longitudinal_intro,
    replication_rng,
    run_mse_experiment,
    sample_mvn,
    std_normal_cdf,
)
from .counterexample import (
    CounterexampleSpec,
    QuadratureSettings,
    conditional_variance,
    density_pdelta,
    divergence_ratio,
    empirical_cross_check,
    find_delta_for_eta,
    integrate,
    population_minimizers,
    population_sandwich_V,
)

__all__ = [name for name in dir() if not name.startswith("_")]
