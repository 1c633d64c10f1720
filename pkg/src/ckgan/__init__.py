"""Kernel-critic GANs (CKGAN) on 2D mixture benchmarks, built on a small
numpy autodiff tape."""

from .autodiff import NonFiniteError, ShapeError, Tape, TapeError, evaluate, gradient, gradient_as_nodes
from .kernels import KernelMix, make_kernel
from .trainer import TrainConfig, TrainingDiverged, init_state, train

__version__ = "0.1.0"

__all__ = [
    "KernelMix", "NonFiniteError", "ShapeError", "Tape", "TapeError", "TrainConfig", "TrainingDiverged",
    "evaluate", "gradient", "gradient_as_nodes", "init_state", "make_kernel", "train",
]
