"""Scikit-learn style estimator facade over the training pipeline.

``MCGMRegressor`` wraps model construction, hierarchical clustering,
training, and prediction behind the familiar ``fit`` / ``predict`` /
``transform`` / ``get_params`` surface so the package drops into
sklearn-flavored workflows (cloning, grid search over constructor
parameters, pipelines that accept object features).

X is a sequence of ``Molecule`` objects rather than a numeric matrix:
molecules have variable atom counts, so a rectangular feature table
cannot represent them.  ``transform`` maps molecules to fixed-width
per-atom feature arrays learned by the backbone.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

from .clustering import STRATEGIES, ClusterConfig
from .data import DatasetSplit
from .errors import ContractError
from .model import BackboneConfig, init_model, mcgm_forward
from .training import TrainConfig, predict_molecules, train
from .validation import attach_energies, check_is_fitted, check_molecule_list, check_targets_1d


class MCGMRegressor(BaseEstimator, RegressorMixin):
    """Molecular energy regressor with a hierarchical long-range channel.

    Parameters mirror the backbone, clustering, and trainer configs; see
    those modules for semantics.  ``variant="baseline"`` disables every
    cluster exchange, leaving the plain message-passing backbone.
    ``validation_fraction`` of the fitted molecules is held out to drive
    early stopping and best-model selection.
    """

    def __init__(
        self,
        hidden_dim=64,
        n_layers=3,
        atom_cutoff=6.0,
        cluster_cutoff=4.0,
        n_rbf_atom=32,
        n_rbf_cluster=16,
        n_levels=3,
        max_z=10,
        variant="mcgm",
        clustering="kmeanspp",
        reduction_ratio=2,
        lr=1e-3,
        weight_decay=0.0,
        batch_size=32,
        warmup_steps=100,
        scheduler="cosine_warmup",
        max_epochs=30,
        early_stop_patience=50,
        loss="energy_l1",
        validation_fraction=0.1,
        seed=0,
    ):
        self.hidden_dim = hidden_dim
        self.n_layers = n_layers
        self.atom_cutoff = atom_cutoff
        self.cluster_cutoff = cluster_cutoff
        self.n_rbf_atom = n_rbf_atom
        self.n_rbf_cluster = n_rbf_cluster
        self.n_levels = n_levels
        self.max_z = max_z
        self.variant = variant
        self.clustering = clustering
        self.reduction_ratio = reduction_ratio
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.warmup_steps = warmup_steps
        self.scheduler = scheduler
        self.max_epochs = max_epochs
        self.early_stop_patience = early_stop_patience
        self.loss = loss
        self.validation_fraction = validation_fraction
        self.seed = seed

    # ------------------------------------------------------------- config

    def _backbone_config(self):
        return BackboneConfig(
            hidden_dim=self.hidden_dim,
            n_layers=self.n_layers,
            atom_cutoff=self.atom_cutoff,
            cluster_cutoff=self.cluster_cutoff,
            n_rbf_atom=self.n_rbf_atom,
            n_rbf_cluster=self.n_rbf_cluster,
            n_levels=self.n_levels,
            max_z=self.max_z,
            variant=self.variant,
        )

    def _cluster_config(self):
        if self.clustering not in STRATEGIES:
            raise ContractError(
                f"clustering must be one of {STRATEGIES}, got {self.clustering!r}"
            )
        return ClusterConfig(strategy=self.clustering, reduction_ratio=self.reduction_ratio)

    def _train_config(self):
        return TrainConfig(
            lr=self.lr,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            warmup_steps=self.warmup_steps,
            scheduler=self.scheduler,
            max_epochs=self.max_epochs,
            early_stop_patience=self.early_stop_patience,
            loss=self.loss,
            seeds=(int(self.seed),),
            cluster=self._cluster_config(),
        )

    def _holdout_split(self, n):
        if not 0 < self.validation_fraction < 1:
            raise ContractError("validation_fraction must be in (0, 1)")
        n_val = max(1, int(round(n * self.validation_fraction)))
        if n_val >= n:
            raise ContractError(
                f"validation_fraction={self.validation_fraction} leaves no training "
                f"molecules out of {n}"
            )
        perm = np.random.default_rng((int(self.seed), 53)).permutation(n)
        return DatasetSplit(
            train=sorted(int(i) for i in perm[n_val:]),
            val=sorted(int(i) for i in perm[:n_val]),
            test=[],
            seed=int(self.seed),
        )

    # -------------------------------------------------------------- sklearn

    def fit(self, X, y=None):
        """Train on molecules; energies come from ``y`` or the molecules.

        ``y`` (optional) is one energy per molecule and overrides any
        stored targets; when omitted, every molecule must carry one.
        Sets ``state_`` (trained parameters), ``history_`` (per-epoch
        metrics), and ``best_val_mae_``.  Returns self.
        """
        mols = check_molecule_list(X)
        if y is not None:
            mols = attach_energies(mols, y)
        mols = check_molecule_list(mols, require_energy=True, max_z=self.max_z)
        if self.loss == "energy_force_mse":
            mols = check_molecule_list(mols, require_forces=True)
        cfg = self._train_config()
        state = init_model(self._backbone_config(), seed=int(self.seed))
        result = train(state, mols, self._holdout_split(len(mols)), cfg, seed=int(self.seed))
        for name, p in state.params.items():
            p.data[...] = result.best_tensors[name]
        self.state_ = state
        self.history_ = result.history
        self.best_val_mae_ = result.best_val
        self.n_features_in_ = 1  # object feature: the molecule itself
        return self

    def predict(self, X):
        """Energies (meV) for a sequence of molecules, shape [n]."""
        check_is_fitted(self)
        mols = check_molecule_list(X, max_z=self.max_z)
        energies, _ = predict_molecules(self.state_, mols, self._cluster_config())
        return energies

    def predict_forces(self, X):
        """Per-molecule force arrays [n_atoms, 3] (meV/Å)."""
        check_is_fitted(self)
        mols = check_molecule_list(X, max_z=self.max_z)
        _, force_rows = predict_molecules(
            self.state_, mols, self._cluster_config(), with_forces=True
        )
        return force_rows

    def transform(self, X):
        """Learned per-atom feature arrays [n_atoms, hidden_dim] per molecule.

        Features are taken after the full stack using the element-level
        hierarchy, the same bootstrap representation evaluation clustering
        is built from.
        """
        check_is_fitted(self)
        from .data import make_batch
        from .training import _training_hierarchy

        mols = check_molecule_list(X, max_z=self.max_z)
        out = []
        for m in mols:
            batch = make_batch([m])
            hier = None
            if self.state_.config.variant == "mcgm":
                hier = _training_hierarchy(
                    batch, None, 0, np.zeros(1, dtype=np.int64),
                    self._cluster_config(), 1,
                )
            h, _ = mcgm_forward(batch, hier, self.state_.detached())
            out.append(h.data.copy())
        return out

    def score(self, X, y=None):
        """Coefficient of determination R^2 on energies."""
        mols = check_molecule_list(X)
        if y is None:
            mols = check_molecule_list(mols, require_energy=True)
            y = np.array([m.energy for m in mols])
        y = check_targets_1d(y, len(mols), name="y")
        pred = self.predict(mols)
        ss_res = float(np.sum((y - pred) ** 2))
        ss_tot = float(np.sum((y - y.mean()) ** 2))
        return 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
