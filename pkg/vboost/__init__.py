from .boosting import (
    Freeze,
    VariationalBoosting,
    VBoostConfig,
    fit_component,
    marginal_variance_pct_change,
    rank_fixed_point_residual,
)
from .elbo import boost_grad, elbo_estimate, first_component_grad
from .init_em import EmConfig, init_component, max_weight_init, weighted_em
from .lowrank import GaussianComponent, LowRankDiagCov
from .mixture import MixtureApprox, load_mixture, save_mixture
from .models import BinomialData, ElboEstimate, PoissonGlmData, VBoostResult
from .report import Report
from .targets import (
    TargetModel,
    factor_gaussian_target,
    gauss_target,
    gen_poisson_data,
    gmm_target,
    hierarchical_binomial,
    load_binomial_csv,
    load_poisson_csv,
    multilevel_poisson,
)
