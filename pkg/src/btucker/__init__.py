"""Bayesian Tucker tensor factorization with adaptive multi-rank.

A Gibbs sampler learns the per-mode ranks of a K-way tensor through a
multiway cumulative shrinkage prior, handles continuous and binary data,
and imputes missing entries from the posterior predictive distribution.
"""

from .tensors import (
    DenseTensor,
    TensorFormatError,
    flat_index,
    gram_of_design,
    kron_exclude,
    masked_mse,
    matricize,
    mode_product,
    read_tensor_text,
    refold,
    tucker_reconstruct,
    vectorize,
    write_tensor_text,
)
from .distributions import (
    RngHandle,
    logpdf_iso_normal,
    logpdf_iso_student_t,
    sample_beta,
    sample_categorical,
    sample_exponential,
    sample_gamma,
    sample_gig,
    sample_invgamma,
    sample_normal,
    sample_truncnorm,
)
from .cusp import (
    CuspModeState,
    count_active,
    prior_draw_mode,
    sample_indicators,
    sample_sticks,
    sample_theta,
    stick_breaking,
)
from .engine import (
    FitConfig,
    ModelState,
    NumericalAbort,
    PosteriorSamples,
    adapt_ranks,
    adaptation_probability,
    impute_missing,
    init_state,
    initial_truncation,
    load_checkpoint,
    probability_tensor,
    probit_update_latent,
    resume_chain,
    run_chain,
    save_checkpoint,
    update_core,
    update_factor_matrix,
    update_sigma2,
)
from .experiments import Scenario, er_gr_ranks, run_benchmark, simulate

__version__ = "0.1.0"
