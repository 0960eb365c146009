"""slimforge: structured channel pruning and detection distillation over an
explicit CNN computation-graph IR, with a minimal CPU autodiff engine."""

from . import (accounting, autodiff, blobio, branch_prune, detection, distill,
               graph_ir, harness, residual_matching, slimming)

__all__ = [
    "accounting", "autodiff", "blobio", "branch_prune", "detection",
    "distill", "graph_ir", "harness", "residual_matching", "slimming",
]

__version__ = "0.1.0"
