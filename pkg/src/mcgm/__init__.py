"""MCGM: hierarchical cluster message passing for molecular energies.

A message-passing energy model whose receptive field is extended beyond
the atom-neighborhood cutoff by a hierarchy of learned clusters: atoms
exchange features with their cluster's centroid node at every layer, and
coarser levels exchange with their own parents, so distant structure
reaches every atom through a logarithmic number of hops.  Everything —
including the reverse-mode gradients that turn energies into forces — is
implemented on plain float64 numpy arrays.

Public surface:

* ``MCGMRegressor``          — sklearn-style facade (fit/predict/transform)
* ``Molecule`` / ``Batch``   — data containers, XYZ IO, synthetic task
* ``BackboneConfig`` / ``init_model`` / ``mcgm_forward`` — the network
* ``ClusterConfig`` / ``build_hierarchy``   — hierarchical clustering
* ``TrainConfig`` / ``train`` / ``evaluate`` — optimization loop
* ``predict_batch`` / ``loss_value``        — energies, forces, losses
* ``save_checkpoint`` / ``load_checkpoint`` — parameter container format

The ``mcgm`` command line (``mcgm gen|train|eval|inspect``) drives the
same pieces end to end.
"""

from .clustering import ClusterAssignment, ClusterConfig, element_clusters, kmeans_cluster
from .data import (
    Batch,
    DatasetSplit,
    Molecule,
    make_batch,
    make_synthetic,
    parse_xyz,
    read_manifest,
    split,
    write_manifest,
    write_xyz,
)
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    GenerationError,
    McgmError,
    NumericError,
    ParseError,
)
from .estimator import MCGMRegressor
from .hierarchy import Hierarchy, build_hierarchy
from .model import (
    BackboneConfig,
    ModelState,
    init_model,
    load_checkpoint,
    mcgm_forward,
    save_checkpoint,
)
from .readout import Prediction, forces, loss_value, predict_batch
from .training import TrainConfig, evaluate, lr_at, optimizer_step, predict_molecules, train

__version__ = "0.1.0"

__all__ = [
    "Batch",
    "BackboneConfig",
    "ClusterAssignment",
    "ClusterConfig",
    "ConfigError",
    "ContractError",
    "DataError",
    "DatasetSplit",
    "DimensionError",
    "GenerationError",
    "Hierarchy",
    "MCGMRegressor",
    "McgmError",
    "ModelState",
    "Molecule",
    "NumericError",
    "ParseError",
    "Prediction",
    "TrainConfig",
    "build_hierarchy",
    "element_clusters",
    "evaluate",
    "forces",
    "init_model",
    "kmeans_cluster",
    "load_checkpoint",
    "loss_value",
    "lr_at",
    "make_batch",
    "make_synthetic",
    "mcgm_forward",
    "optimizer_step",
    "parse_xyz",
    "predict_batch",
    "predict_molecules",
    "read_manifest",
    "save_checkpoint",
    "split",
    "train",
    "write_manifest",
    "write_xyz",
    "__version__",
]
