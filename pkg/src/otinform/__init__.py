"""Entropic optimal transport with informative transport-plan regularization."""

from otinform.measure import (
    DiscreteMeasure,
    GroundCost,
    LatentSpec,
    cost_matrix,
    diagonal_mixture_dataset,
    gaussian_grid_dataset,
    sample_latent,
    unit_square_grid,
)
from otinform.sinkhorn import (
    Potentials,
    TransportPlan,
    brute_force_ot,
    c_eps_transform,
    entropic_ot_value,
    recover_plan,
    sinkhorn_divergence,
    sinkhorn_potentials,
)

__version__ = "0.1.0"

__all__ = [
    "DiscreteMeasure",
    "GroundCost",
    "LatentSpec",
    "Potentials",
    "TransportPlan",
    "brute_force_ot",
    "c_eps_transform",
    "cost_matrix",
    "diagonal_mixture_dataset",
    "entropic_ot_value",
    "gaussian_grid_dataset",
    "recover_plan",
    "sample_latent",
    "sinkhorn_divergence",
    "sinkhorn_potentials",
    "unit_square_grid",
]
