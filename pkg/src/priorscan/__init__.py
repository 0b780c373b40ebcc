"""priorscan: hyperparameter surfaces from a single MCMC run.

Estimates the marginal-likelihood surface B_n(h) (up to a constant) and
posterior-expectation surfaces I_g(h) over a compact hyperparameter rectangle
by importance reweighting of one chain, and attaches frequentist-valid
uncertainty: a confidence ellipse for the empirical-Bayes argmax via
regenerative tour statistics, and globally valid confidence bands via batching.
"""

from priorscan.prior_family import (
    HyperRect,
    ExpFamilySpec,
    EnvelopeSet,
    RatioFamily,
    ExpFamilyRatio,
    log_ratio,
    ratio_grad,
    ratio_hess,
    envelope_corners,
    check_envelope,
    get_family,
    register_family,
)
from priorscan.chain_runtime import (
    ChainTrace,
    TourIndex,
    TourSums,
    MinorizationPair,
    simulate,
    split_step,
    indep_mh_regen_prob,
    segment_tours,
    tour_sums,
)
from priorscan.estimators import (
    SurfaceEstimate,
    FunctionalEstimate,
    estimate_B,
    weights,
    estimate_I,
    ess,
    pointwise_se_B,
    pointwise_se_I,
    cov_I_pair,
    surface_on_grid,
    functional_on_grid,
)
from priorscan.argmax_inference import (
    ArgmaxReport,
    maximize_surface,
    hessian_Jn,
    tau_n_sq,
    v_n_sq,
    confidence_ellipse,
    batch_argmax_cov,
)
from priorscan.band_inference import BandReport, global_band
from priorscan.serial_tempering import (
    STGrid,
    MixtureRatio,
    st_step,
    tune_zeta,
    st_denominator,
    run_st,
)

__version__ = "0.1.0"
