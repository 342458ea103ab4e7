from .pacing import SHAPES, PacingConfig, pace, schedule, shape_fraction
from .plan import CurriculumPlan, build_plan
from .scoring import (
    ORDERS,
    SCORERS,
    ScoredDataset,
    order_scores,
    per_sample_losses,
    pretrain_scorer,
    score_by_count,
    score_dataset,
    score_random,
    score_self_taught,
    score_transfer,
)

__all__ = [
    "SHAPES", "PacingConfig", "pace", "schedule", "shape_fraction",
    "CurriculumPlan", "build_plan",
    "ORDERS", "SCORERS", "ScoredDataset", "order_scores", "per_sample_losses", "pretrain_scorer",
    "score_by_count", "score_dataset", "score_random", "score_self_taught", "score_transfer",
]
