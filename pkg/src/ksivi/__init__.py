"""Kernel semi-implicit variational inference with a small numpy autodiff."""

from .family import HierarchicalFamily, SemiImplicitFamily
from .kernels import IMQ, GaussianRBF, RieszSmoothed, make_kernel
from .train import HKSIVI, KSIVI, HkSchedule, TrainSchedule, train_hksivi, train_ksivi

__version__ = "0.1.0"

__all__ = [
    "GaussianRBF",
    "IMQ",
    "RieszSmoothed",
    "make_kernel",
    "SemiImplicitFamily",
    "HierarchicalFamily",
    "TrainSchedule",
    "HkSchedule",
    "train_ksivi",
    "train_hksivi",
    "KSIVI",
    "HKSIVI",
]
