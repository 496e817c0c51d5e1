"""Collaborative-filtering recommenders with fast influence-based unranking."""

from .cg import CGBreakdown, CGConfig, CGReport, solve
from .data import (
    ForgetPartition,
    ForgetRequest,
    InteractionDataset,
    build_dataset,
    generate_forget_set,
    load_interactions,
)
from .influence import InfluenceWeights, quantify
from .metrics import mia_fpr, ranking_metrics, speedup, urr
from .models import (
    BPRRecommender,
    ModelParams,
    PropagationOperator,
    TrainConfig,
    init_params,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .scoping import InfluencedScope, expand_scope
from .unlearn import L2UnRank, UnlearnConfig, UnlearnResult, unlearn

__version__ = "0.1.0"
