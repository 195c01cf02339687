"""Graph-flow knowledge distillation for semantic segmentation on a numpy autodiff core."""

__version__ = "0.1.0"
