"""Maximum-likelihood estimation for mixtures of continuous-time Markov jump processes."""

__version__ = "0.1.0"

from .analysis import (
    absorption_frequencies,
    absorption_probs,
    aic,
    aic_scan,
    chi2_cdf,
    chi2_sf,
    ks_normality,
    lrt,
    mc_study,
    param_count,
)
from .em import EmConfig, FitResult, e_step, fit, fit_constrained, init_params, m_step, m_step_constrained
from .inference import (
    asymptotic_cov,
    covariance_from_info,
    expected_occupancy,
    louis_info,
    matexp,
    matexp_integral,
)
from .likelihood import (
    ConstrainedParams,
    ParamIndex,
    complete_loglik,
    complete_mle,
    constrained_observed_loglik,
    observed_loglik,
    regime_loglik,
)
from .model import (
    EmbeddedChain,
    IntensityMatrix,
    MixtureModel,
    StateSpace,
    canonicalize_labels,
    from_embedded,
    to_embedded,
    validate_model,
)
from .paths import CohortStats, PathStats, SamplePath, aggregate, cohort_stats, parse_paths, path_stats
from .simulate import SimConfig, simulate_cohort, simulate_path
