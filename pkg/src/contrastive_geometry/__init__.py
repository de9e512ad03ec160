"""Alignment/uniformity analysis of instance and dense contrastive features."""

__version__ = "0.1.0"

from .errors import *  # noqa: F401,F403
from .features import (
    FeatureMap,
    InstanceVector,
    ViewPairBatch,
    cosine_sim,
    gaussian_potential,
    l2_normalize,
    pairwise_cos_matrix,
    read_dclf,
    write_dclf,
)
from .losses import (
    LossConfig,
    LossReport,
    alignment_loss,
    combined_loss,
    dense_info_nce,
    instance_info_nce,
    loss_gradient,
    uniformity_loss,
)
from .matching import (
    PairAssignment,
    TransportPlan,
    cosine_argmax_pairs,
    cost_map,
    index_wise_pairs,
    optimal_transport_pairs,
    ot_distance,
    sinkhorn_plan,
)
from .correlation import CorrelationReport, ModelRecord, correlate_models, kendall_tau_b, min_max_normalize
from .optimizer import OptimState, init_random, run
