"""Minimal deterministic reverse-mode autodiff over dense float tensors."""

from fuselab.ndlab.tensor import Gradients, NDLabError, Tape, Tensor
from fuselab.ndlab.params import ParamStore, he_uniform_init
from fuselab.ndlab import ops
from fuselab.ndlab.gradcheck import finite_difference

__all__ = [
    "Gradients",
    "NDLabError",
    "ParamStore",
    "Tape",
    "Tensor",
    "finite_difference",
    "he_uniform_init",
    "ops",
]
