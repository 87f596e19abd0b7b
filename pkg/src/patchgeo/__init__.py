"""Multi-patch geometry refinement for depth and surface normals.

A small numpy transformer refines coarse depth and normal maps patch by
patch, with cross-patch attention and RoPE over global pixel coordinates so
tiles stay consistent where they meet.
"""

from .model import Model, ModelConfig
from .patchgrid import GridConfig, ImageExtent, PatchSet, cover, sample_grid
from .metrics import MetricReport
from .training import TrainConfig, train
from .data import generate
from .inference import evaluate, evaluate_coarse, infer

__all__ = [
    "GridConfig", "ImageExtent", "MetricReport", "Model", "ModelConfig", "PatchSet",
    "TrainConfig", "cover", "evaluate", "evaluate_coarse", "generate", "infer", "sample_grid",
    "train",
]
__version__ = "0.1.0"
