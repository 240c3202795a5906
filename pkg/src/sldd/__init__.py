"""Soft-label dataset distillation for patch-based gastritis detection."""

from .distill import DistillConfig, DistilledArtifact, distill
from .nets import ModelSpec, ModelState, init_xavier
from .patches import PatchDataset, SliceConfig

__all__ = [
    "DistillConfig",
    "DistilledArtifact",
    "ModelSpec",
    "ModelState",
    "PatchDataset",
    "SliceConfig",
    "distill",
    "init_xavier",
]
