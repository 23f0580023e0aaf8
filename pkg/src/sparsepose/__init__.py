"""End-to-end multi-person pose regression with instance and part queries."""
from .config import ModelConfig, RunConfig, load_config
from .pipeline import PoseModel, ScoredPose, infer, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "ModelConfig", "RunConfig", "load_config", "PoseModel", "ScoredPose", "infer",
    "load_checkpoint", "save_checkpoint", "__version__",
]
