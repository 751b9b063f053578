"""Adaptive preconditioned Crank-Nicolson MCMC for function-space Bayesian inverse problems."""

from .kl import (FieldState, Grid, KlBasis, MaternParams, build_kl_basis, build_kl_basis_from_matrix,
                 matern_kernel, prior_sample, project, select_J)
from .models import (HeatModel, HeatSolverConfig, LinearGaussianModel, ObservationSet, OdeModel,
                     analytic_posterior, generate_synthetic_data, heat_forward, linear_gaussian_forward,
                     make_phi, ode_forward)
from .samplers import (AdaptiveState, Chain, SamplerConfig, StepSize, acceptance_prob, adapt_batch,
                       adapt_update, apcn_propose, cn_propose, cn_substitution_check, contraction_factor,
                       pcn_propose, run_mcmc)
from .diagnostics import acf, adaptation_decay, ess, summarize

__version__ = "0.1.0"
