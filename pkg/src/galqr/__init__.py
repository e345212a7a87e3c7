"""Bayesian scalar-on-function quantile regression with measurement-error
correction, built on generalized asymmetric Laplace working likelihoods."""

__version__ = "0.1.0"

from .basis import BasisSystem, CoefCurve, build_basis, eval_beta, project_curve
from .calibration import (ScoreDataset, moment_estimates, naive_scores,
                          rc_calibrate)
from .data import FunctionalDataset
from .gal import (GalMixture, GalParams, adjust_tau, gal_logpdf, gal_sample,
                  galmix_logpdf, galmix_sample, gamma_bounds, h_of_gamma)
from .sampler import (ModelState, PosteriorDraws, PriorConfig,
                      SamplerDivergenceError, fit, gibbs_step, waic)
from .simulate import (MetricsReport, SimConfig, generate_case, run_case,
                       score_estimates, sim_gp_exchangeable, skew_t_sample)
from .variates import gig_sample, trunc_normal_sample

__all__ = [
    "BasisSystem", "CoefCurve", "build_basis", "eval_beta", "project_curve",
    "ScoreDataset", "moment_estimates", "naive_scores", "rc_calibrate",
    "FunctionalDataset",
    "GalMixture", "GalParams", "adjust_tau", "gal_logpdf", "gal_sample",
    "galmix_logpdf", "galmix_sample", "gamma_bounds", "h_of_gamma",
    "ModelState", "PosteriorDraws", "PriorConfig", "SamplerDivergenceError",
    "fit", "gibbs_step", "waic",
    "MetricsReport", "SimConfig", "generate_case", "run_case",
    "score_estimates", "sim_gp_exchangeable", "skew_t_sample",
    "gig_sample", "trunc_normal_sample",
    "__version__",
]
