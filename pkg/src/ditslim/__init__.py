"""Toy video-DiT compression: width pruning, adaptive block routing, and
progressive two-stage distillation, on a minimal float64 autodiff engine."""

from .model import DiTConfig, DiTParams, dit_forward, flow_matching_loss, forward_process
from .tensor import Tape, Tensor, grad_check, seeded_rng

__all__ = [
    "DiTConfig",
    "DiTParams",
    "Tape",
    "Tensor",
    "dit_forward",
    "flow_matching_loss",
    "forward_process",
    "grad_check",
    "seeded_rng",
]

__version__ = "0.1.0"
