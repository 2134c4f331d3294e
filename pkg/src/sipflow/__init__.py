"""sipflow: stochastic inverse problems over probability measures, solved
by a particle-discretized Wasserstein gradient flow, with a MAP-style
discretize-then-optimize baseline for comparison."""

from .discrepancy import (
    DiscrepancySpec,
    EnergyKernel,
    GaussianKernel,
    SampleCloud,
    energy_distance,
    kl_first_variation_grad,
    kl_value,
    mmd_first_variation_grad,
    mmd_sq_value,
)
from .ensemble import (
    GaussianMixtureSpec,
    KdeDensity,
    ParticleEnsemble,
    kde_eval,
    kde_grad_log,
    sample_mixture,
    silverman_bandwidth,
)
from .flow import (
    FlowConfig,
    FlowProblem,
    FlowState,
    adam_step,
    compute_update_direction,
    estimator_variance_report,
    mc_estimate,
    run_flow,
)
from .forward import (
    AffineIdentityOperator,
    ImageSpec,
    NanoclusterOperator,
    NuisanceDraw,
    PseudoAtomModel,
    ToyProteinOperator,
    affine_identity_apply,
    finite_difference_check,
    nanocluster_render,
    sample_rotation,
    toy_protein_apply,
    vjp,
)
from .mapdto import MapObjectiveSpec, consistency_diagnostics, map_grad, map_loss
from .metrics import PcaBasis, pca_fit_project, w2_1d, w2_assignment
from .rng import substream

__version__ = "0.1.0"

__all__ = [
    "AffineIdentityOperator",
    "DiscrepancySpec",
    "EnergyKernel",
    "FlowConfig",
    "FlowProblem",
    "FlowState",
    "GaussianKernel",
    "GaussianMixtureSpec",
    "ImageSpec",
    "KdeDensity",
    "MapObjectiveSpec",
    "NanoclusterOperator",
    "NuisanceDraw",
    "ParticleEnsemble",
    "PcaBasis",
    "PseudoAtomModel",
    "SampleCloud",
    "ToyProteinOperator",
    "adam_step",
    "affine_identity_apply",
    "compute_update_direction",
    "consistency_diagnostics",
    "energy_distance",
    "estimator_variance_report",
    "finite_difference_check",
    "kde_eval",
    "kde_grad_log",
    "kl_first_variation_grad",
    "kl_value",
    "map_grad",
    "map_loss",
    "mc_estimate",
    "mmd_first_variation_grad",
    "mmd_sq_value",
    "nanocluster_render",
    "pca_fit_project",
    "run_flow",
    "sample_mixture",
    "sample_rotation",
    "silverman_bandwidth",
    "substream",
    "toy_protein_apply",
    "vjp",
    "w2_1d",
    "w2_assignment",
]
