"""Meta-learned embedding dynamics models with online adaptation and similarity-guided planning."""

from .adapt import AdaptConfig, run_meta_test
from .enn import EmbeddingTable, EnnModel, TaskEmbedding, TransitionDataset
from .envworld import Env, TaskSpec, get_family
from .metatrain import MetaTrainConfig, meta_train
from .planner import AnchorMPCPlanner, MACPlanner, MPCPlanner, PlannerConfig

__version__ = "0.1.0"

__all__ = [
    "AdaptConfig", "run_meta_test", "EmbeddingTable", "EnnModel", "TaskEmbedding", "TransitionDataset",
    "Env", "TaskSpec", "get_family", "MetaTrainConfig", "meta_train", "AnchorMPCPlanner", "MACPlanner",
    "MPCPlanner", "PlannerConfig",
]
