"""Desk-scale search over spatiotemporal attention cells.

Subpackages cover a small autodiff engine over numpy arrays (`tensor`),
the attention operation primitives (`ops`), cell assembly (`cell`), the
differentiable supergraph search (`supergraph`), Gaussian-process
Bayesian search over discrete cells (`gpb`), a toy video-classification
harness (`harness`), and the command line front end (`cli`).
"""

from . import cell, gpb, gradcheck, harness, ops, supergraph, tensor
from .cell import CellParams, CellSpec, random_cell_spec, render_cell, run_cell
from .gpb import CellEncoder, run_gpb
from .harness import Dataset, ToyBackbone, TrainConfig, generate_dataset, train
from .ops import AttentionOpSpec
from .supergraph import ConnectionWeights, derive_cell, preset_config
from .tensor import ParameterStore, Tensor

__version__ = "0.1.0"

__all__ = [
    "tensor", "ops", "cell", "supergraph", "gpb", "harness", "gradcheck",
    "Tensor", "ParameterStore",
    "AttentionOpSpec", "CellSpec", "CellParams",
    "random_cell_spec", "render_cell", "run_cell",
    "ConnectionWeights", "preset_config", "derive_cell",
    "CellEncoder", "run_gpb",
    "ToyBackbone", "Dataset", "TrainConfig", "generate_dataset", "train",
    "__version__",
]
