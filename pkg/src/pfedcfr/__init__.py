"""Layer-wise personalized federated learning on small numpy MLPs."""

from .data import ClientShard, Dataset, PartitionConfig, gen_synthetic, load_idx, partition_heterogeneous
from .fusion import FusionPlan, SimilarityParams, fuse_round, fuse_whole_model, make_plan
from .nn import Batch, LayerSpec, ModelSpec, forward, init_model, loss_and_grad
from .runtime import METHODS, MethodConfig, final_accuracy, run_experiment, run_round

__version__ = "0.1.0"

__all__ = [
    "Batch",
    "ClientShard",
    "Dataset",
    "FusionPlan",
    "LayerSpec",
    "METHODS",
    "MethodConfig",
    "ModelSpec",
    "PartitionConfig",
    "SimilarityParams",
    "final_accuracy",
    "forward",
    "fuse_round",
    "fuse_whole_model",
    "gen_synthetic",
    "init_model",
    "load_idx",
    "loss_and_grad",
    "make_plan",
    "partition_heterogeneous",
    "run_experiment",
    "run_round",
]
