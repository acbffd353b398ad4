"""Semi-supervised point cloud completion: reconstruction-aware pretraining
followed by prior distillation and self-supervised completion."""

__version__ = "0.1.0"
