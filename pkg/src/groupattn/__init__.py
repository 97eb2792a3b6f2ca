"""Attention-coordinated neighborhood grouping for point-cloud analysis.

Public surface: the sklearn-style estimators, the backbone and its config,
the tensor engine, and the synthetic-data utilities.  The ``groupattn``
console script exposes dataset generation, pretraining, training,
evaluation, gradient checking, benchmarks, and sweeps.
"""


def _tune_allocator():
    # Training churns through large short-lived arrays; glibc returns them
    # to the OS on free by default, so every step pays page faults again.
    # Keeping big blocks on the heap is worth ~3x. GROUPATTN_NO_MALLOC_TUNE
    # opts out.
    import ctypes
    import os

    if os.environ.get("GROUPATTN_NO_MALLOC_TUNE"):
        return
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 256 * 1024 * 1024)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, -1)  # M_TRIM_THRESHOLD: never trim
    except (OSError, AttributeError):
        pass


_tune_allocator()

from .autodiff import Tensor, Tape, grad_check, no_grad
from .backbone import Backbone, BackboneConfig, read_checkpoint, write_checkpoint
from .config import RunConfig
from .data import (
    SHAPE_NAMES,
    PointCloud,
    generate_synthetic,
    load_xyz,
    normalize_unit_sphere,
    save_xyz,
)
from .estimators import PointCloudClassifier, SelfSupervisedPointEncoder
from .pretrain import PerturbSpec, SslLossConfig
from .train import OptimConfig

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "Tape",
    "grad_check",
    "no_grad",
    "Backbone",
    "BackboneConfig",
    "read_checkpoint",
    "write_checkpoint",
    "RunConfig",
    "SHAPE_NAMES",
    "PointCloud",
    "generate_synthetic",
    "load_xyz",
    "normalize_unit_sphere",
    "save_xyz",
    "PointCloudClassifier",
    "SelfSupervisedPointEncoder",
    "PerturbSpec",
    "SslLossConfig",
    "OptimConfig",
    "__version__",
]
