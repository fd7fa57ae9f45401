"""Optimization loop for the energy model.

Pieces, in dependency order:

* ``TrainConfig``   — every knob of a run: optimizer, schedule, loss mode,
  batch size, epoch budget, early stopping, clustering settings, seeds.
* ``OptimizerState`` / ``optimizer_step`` — AdamW with bias-corrected
  moments and *decoupled* weight decay (decay is applied directly to the
  parameters, never mixed into the gradient-based update).
* ``lr_at``         — the two learning-rate schedules: ``cosine_warmup``
  (linear ramp to the configured rate, cosine decay to zero) and
  ``plateau`` (multiply by ``plateau_factor`` after ``plateau_patience``
  epochs without validation improvement).
* ``train``         — the epoch loop: per-epoch hierarchy rebuilds from a
  feature snapshot, shuffled mini-batches, validation, scheduling, early
  stopping, and checkpointing.  Fully deterministic given the seed.
* ``evaluate``      — MAE report for a stored checkpoint on a molecule
  list, plus mean/std aggregation helpers for multi-seed tables.

Clustering schedule.  Levels above the element level cluster on learned
features, which change as the model trains, so hierarchies are rebuilt
once per epoch.  Epoch 0 has no trained features yet and runs on the
element-level hierarchy alone; every later epoch snapshots atom features
at epoch start (one forward pass per molecule using the previous epoch's
hierarchy) and clusters on that snapshot.  Evaluation builds hierarchies
the same way from the evaluated model's own features: a bootstrap pass on
the element-level hierarchy, then a fresh deterministic clustering of the
resulting features (stream key epoch 0).

Units are meV for energies and meV/Å for force components throughout; no
conversions happen anywhere in the package.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .clustering import ClusterConfig
from .data import make_batch
from .errors import ContractError, DataError, NumericError
from .hierarchy import build_hierarchy
from .model import load_checkpoint, mcgm_forward, save_checkpoint, state_from_tensors
from .readout import energy, forces, loss_value, predict_batch, LOSS_MODES

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8
IMPROVEMENT_EPS = 1e-12
SCHEDULERS = ("cosine_warmup", "plateau")

_STREAM_SHUFFLE = 41
_SNAPSHOT_CHUNK = 64
_OPT_M = "opt.m."
_OPT_V = "opt.v."
_CLUSTER_T = "cluster."


# ------------------------------------------------------------------ config


@dataclass
class TrainConfig:
    """Hyperparameters of one training run.

    ``max_steps`` is the cosine-decay horizon in optimizer steps; ``None``
    means "resolve to max_epochs * steps_per_epoch once the dataset size
    is known".  ``seeds`` drives multi-seed drivers; ``train`` itself runs
    a single seed.  ``freeze_prefixes`` names parameter groups excluded
    from optimization entirely (no update, no weight decay).
    """

    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 32
    warmup_steps: int = 100
    scheduler: str = "cosine_warmup"
    plateau_factor: float = 0.8
    plateau_patience: int = 10
    early_stop_patience: int = 50
    max_epochs: int = 100
    loss: str = "energy_l1"
    seeds: tuple = (0, 1, 2)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    max_steps: int | None = None
    max_grad_norm: float | None = None
    freeze_prefixes: tuple = ()

    def __post_init__(self):
        if not self.lr > 0:
            raise ContractError(f"TrainConfig: lr must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ContractError("TrainConfig: weight_decay must be >= 0")
        for name in ("batch_size", "plateau_patience", "early_stop_patience", "max_epochs"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ContractError(f"TrainConfig: {name} must be an integer >= 1, got {v}")
            setattr(self, name, int(v))
        if int(self.warmup_steps) != self.warmup_steps or self.warmup_steps < 0:
            raise ContractError("TrainConfig: warmup_steps must be an integer >= 0")
        self.warmup_steps = int(self.warmup_steps)
        if self.scheduler not in SCHEDULERS:
            raise ContractError(
                f"TrainConfig: scheduler must be one of {SCHEDULERS}, got {self.scheduler!r}"
            )
        if not 0 < self.plateau_factor <= 1:
            raise ContractError("TrainConfig: plateau_factor must be in (0, 1]")
        if self.loss not in LOSS_MODES:
            raise ContractError(f"TrainConfig: loss must be one of {LOSS_MODES}, got {self.loss!r}")
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise ContractError("TrainConfig: seeds must be non-empty")
        if not isinstance(self.cluster, ClusterConfig):
            raise ContractError("TrainConfig: cluster must be a ClusterConfig")
        if self.max_steps is not None:
            if int(self.max_steps) != self.max_steps or self.max_steps < 1:
                raise ContractError("TrainConfig: max_steps must be an integer >= 1")
            self.max_steps = int(self.max_steps)
        if self.max_grad_norm is not None and not self.max_grad_norm > 0:
            raise ContractError("TrainConfig: max_grad_norm must be positive")
        self.freeze_prefixes = tuple(str(p) for p in self.freeze_prefixes)

    def as_dict(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "cluster":
                v = v.as_dict()
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"TrainConfig: unknown keys {sorted(unknown)}")
        d = dict(d)
        if "cluster" in d and not isinstance(d["cluster"], ClusterConfig):
            d["cluster"] = ClusterConfig.from_dict(d["cluster"])
        for k in ("seeds", "freeze_prefixes"):
            if k in d and isinstance(d[k], list):
                d[k] = tuple(d[k])
        return cls(**d)


# --------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    """AdamW moment estimates, keyed like the parameter map."""

    m: dict
    v: dict
    step: int = 0

    @classmethod
    def for_params(cls, params):
        return cls(
            m={n: np.zeros_like(p.data) for n, p in params.items()},
            v={n: np.zeros_like(p.data) for n, p in params.items()},
        )


def optimizer_step(opt, params, grads, lr, weight_decay):
    """One AdamW update over ``params``; mutates parameters in place.

    The whole step aborts (no parameter is touched) if any gradient is
    non-finite, naming the offending parameter.  Weight decay is decoupled:
    ``p -= lr * wd * p`` on top of the moment-based update.
    """
    for name in params:
        if name not in opt.m:
            raise ContractError(f"optimizer_step: no moments for parameter {name!r}")
        g = grads.get(name)
        if g is None:
            raise ContractError(f"optimizer_step: no gradient for parameter {name!r}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    opt.step += 1
    t = opt.step
    bias1 = 1.0 - BETA1**t
    bias2 = 1.0 - BETA2**t
    for name, p in params.items():
        g = grads[name]
        m = opt.m[name]
        v = opt.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        update = (m / bias1) / (np.sqrt(v / bias2) + ADAM_EPS)
        if weight_decay:
            update = update + weight_decay * p.data
        p.data -= lr * update


# --------------------------------------------------------------- schedules


def lr_at(step, epoch_metric_history, cfg):
    """Learning rate for an optimizer step (``cosine_warmup``) or epoch
    (``plateau``, which ignores ``step`` and walks the metric history)."""
    if step < 0:
        raise ContractError(f"lr_at: step must be >= 0, got {step}")
    if cfg.scheduler == "cosine_warmup":
        if cfg.max_steps is None:
            raise ContractError("lr_at: cosine_warmup needs max_steps resolved")
        if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
            return cfg.lr * step / cfg.warmup_steps
        span = max(1, cfg.max_steps - cfg.warmup_steps)
        progress = min(1.0, max(0.0, (step - cfg.warmup_steps) / span))
        return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * progress))
    # plateau: cut the rate after `patience` epochs without improvement.
    lr = cfg.lr
    best = math.inf
    stagnant = 0
    for metric in epoch_metric_history:
        if metric < best - IMPROVEMENT_EPS:
            best = metric
            stagnant = 0
        else:
            stagnant += 1
            if stagnant >= cfg.plateau_patience:
                lr *= cfg.plateau_factor
                stagnant = 0
    return lr


# ----------------------------------------------------- hierarchy schedule


def _chunks(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i : i + size]


def _training_hierarchy(batch, features, epoch, graph_keys, cluster_cfg, n_levels):
    """Hierarchy for one training batch.

    ``features=None`` is the epoch-0 bootstrap: element-level clusters
    only.  Later epochs cluster the stored feature snapshot to the full
    configured depth, keyed by (epoch, per-molecule dataset index) so the
    result is independent of batch composition.
    """
    if features is None:
        boot = np.zeros((batch.n_atoms, 1))
        return build_hierarchy(batch, boot, 1, cluster_cfg, epoch=0, graph_keys=graph_keys)
    return build_hierarchy(
        batch, features, n_levels, cluster_cfg, epoch=epoch, graph_keys=graph_keys
    )


def _atom_features(state, batch, hierarchy):
    """Detached atom features after the full stack; plain array."""
    h, _ = mcgm_forward(batch, hierarchy, state.detached())
    return h.data.copy()


def _snapshot_features(state, molecules, indices, feature_map, prev_epoch, cluster_cfg, n_levels):
    """New per-molecule feature snapshot, taken at the start of an epoch.

    Runs the model with the *previous* epoch's hierarchies (rebuilt from
    ``feature_map``, which is None right after the bootstrap epoch) and
    returns {dataset index -> [n_atoms, hidden] array}.
    """
    out = {}
    for chunk in _chunks(list(indices), _SNAPSHOT_CHUNK):
        mols = [molecules[i] for i in chunk]
        batch = make_batch(mols)
        keys = np.asarray(chunk, dtype=np.int64)
        feats = None
        if feature_map is not None:
            feats = np.concatenate([feature_map[i] for i in chunk])
        hier = _training_hierarchy(batch, feats, prev_epoch, keys, cluster_cfg, n_levels)
        h = _atom_features(state, batch, hier)
        offsets = np.cumsum([0] + [m.n_atoms for m in mols])
        for j, idx in enumerate(chunk):
            out[idx] = h[offsets[j] : offsets[j + 1]].copy()
    return out


def evaluation_hierarchy(state, batch, cluster_cfg, graph_keys=None):
    """Deterministic evaluation-time hierarchy for one batch.

    Two passes: a bootstrap forward on the element-level hierarchy yields
    invariant features, which are clustered (stream key epoch 0) to the
    model's configured depth.
    """
    if graph_keys is None:
        graph_keys = np.arange(batch.n_graphs, dtype=np.int64)
    boot = _training_hierarchy(batch, None, 0, graph_keys, cluster_cfg, 1)
    feats = _atom_features(state, batch, boot)
    return build_hierarchy(
        batch, feats, state.config.n_levels, cluster_cfg, epoch=0, graph_keys=graph_keys
    )


def predict_molecules(state, molecules, cluster_cfg, with_forces=False, graph_keys=None, batch_size=64):
    """Predict energies (and optionally forces) with evaluation clustering.

    For the cluster-augmented variant this is a two-pass procedure: a
    bootstrap forward on the element-level hierarchy produces features,
    which are then clustered deterministically (stream key epoch 0) to the
    configured depth for the real forward.  The plain backbone needs no
    hierarchy at all.  Returns (energies [n], forces list or None).
    """
    if graph_keys is None:
        graph_keys = np.arange(len(molecules), dtype=np.int64)
    graph_keys = np.asarray(graph_keys, dtype=np.int64)
    if graph_keys.shape != (len(molecules),):
        raise ContractError("predict_molecules: need one graph key per molecule")
    energies = np.empty(len(molecules))
    force_rows = [] if with_forces else None
    pos = 0
    for chunk_ids in _chunks(list(range(len(molecules))), batch_size):
        mols = [molecules[i] for i in chunk_ids]
        batch = make_batch(mols)
        keys = graph_keys[chunk_ids]
        hier = None
        if state.config.variant == "mcgm":
            hier = evaluation_hierarchy(state, batch, cluster_cfg, graph_keys=keys)
        pred = predict_batch(state, batch, hier, with_forces=with_forces)
        energies[pos : pos + len(mols)] = pred.energy
        if with_forces:
            offsets = np.cumsum([0] + [m.n_atoms for m in mols])
            for j in range(len(mols)):
                force_rows.append(pred.forces[offsets[j] : offsets[j + 1]].copy())
        pos += len(mols)
    return energies, force_rows


def mae_energies(pred, target):
    """Mean absolute energy error (meV)."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    if pred.shape != target.shape:
        raise ContractError("mae_energies: shape mismatch")
    return float(np.mean(np.abs(pred - target)))


def mae_forces(pred_rows, target_rows):
    """Mean absolute force-component error (meV/Å) over all atoms."""
    diffs = [np.abs(p - t).reshape(-1) for p, t in zip(pred_rows, target_rows)]
    return float(np.mean(np.concatenate(diffs)))


# ------------------------------------------------------------- train loop


@dataclass
class TrainResult:
    """Outcome of one training run."""

    history: list
    best_val: float
    best_epoch: int
    best_tensors: dict
    state: object
    optimizer: OptimizerState
    stopped_early: bool
    best_path: str | None = None
    last_path: str | None = None


def _resolve(cfg, n_train):
    steps_per_epoch = math.ceil(n_train / cfg.batch_size)
    if cfg.max_steps is None:
        cfg = replace(cfg, max_steps=max(cfg.max_epochs * steps_per_epoch, cfg.warmup_steps + 1))
    elif cfg.scheduler == "cosine_warmup" and cfg.max_steps <= cfg.warmup_steps:
        raise ContractError("TrainConfig: max_steps must exceed warmup_steps for cosine decay")
    return cfg, steps_per_epoch


def _validate_split(molecules, data_split):
    all_idx = data_split.train + data_split.val + data_split.test
    if not data_split.train or not data_split.val:
        raise ContractError("train: split needs non-empty train and val sets")
    if min(all_idx) < 0 or max(all_idx) >= len(molecules):
        raise ContractError("train: split indexes molecules that do not exist")
    if any(molecules[i].energy is None for i in data_split.train + data_split.val):
        raise DataError("train: every train/val molecule needs an energy target")


def _loss_and_grads(state, batch, hier, mode):
    """Forward + backward for one mini-batch; returns the loss float.

    Gradients are left on the parameters.  For the force-matching loss the
    force residual is a constant weight on the energy landscape (no
    second-order terms), so forces are computed first, all gradients are
    cleared, and only the loss is differentiated.
    """
    need_forces = mode == "energy_force_mse"
    positions = ad.Value(batch.positions, requires_grad=need_forces)
    h_atoms, h_clusters = mcgm_forward(batch, hier, state, positions=positions)
    graph_of_cluster = hier.levels[-1].graph_of_cluster if hier is not None else None
    e_total, _, _ = energy(h_atoms, h_clusters, batch, graph_of_cluster, state)
    forces_pred = None
    if need_forces:
        forces_pred = forces(e_total, positions)
        state.zero_grad()
    loss = loss_value(e_total, batch, mode, forces_pred=forces_pred)
    state.zero_grad()
    ad.backward(loss)
    return float(loss.data[0])


def _clip_gradients(grads, max_norm):
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm and total > 0:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total


def _checkpoint_tensors(state, opt, feature_map):
    tensors = {name: p.data.copy() for name, p in state.params.items()}
    for name in opt.m:
        tensors[_OPT_M + name] = opt.m[name].copy()
        tensors[_OPT_V + name] = opt.v[name].copy()
    if feature_map is not None:
        for idx, feats in feature_map.items():
            tensors[f"{_CLUSTER_T}{idx}"] = feats.copy()
    return tensors


def _write_checkpoint(path, state, opt, feature_map, meta):
    tmp = path + ".tmp"
    save_checkpoint(tmp, state.config, _checkpoint_tensors(state, opt, feature_map), meta=meta)
    os.replace(tmp, path)


def _restore(path, cfg, expected_config):
    """Load a `last` checkpoint and rebuild the full training state."""
    config, tensors, meta = load_checkpoint(path)
    if config.as_dict() != expected_config.as_dict():
        raise ContractError("resume: checkpoint architecture differs from the requested one")
    if TrainConfig.from_dict(meta["train_config"]).as_dict() != cfg.as_dict():
        raise ContractError("resume: checkpoint was written with a different train config")
    state = state_from_tensors(config, tensors)
    state.freeze(cfg.freeze_prefixes)
    opt = OptimizerState.for_params(state.trainable())
    for name in opt.m:
        opt.m[name] = np.array(tensors[_OPT_M + name], dtype=np.float64)
        opt.v[name] = np.array(tensors[_OPT_V + name], dtype=np.float64)
    opt.step = int(meta["optimizer_step"])
    feature_map = None
    if meta["cluster_epoch"] >= 0:
        feature_map = {}
        for name, arr in tensors.items():
            if name.startswith(_CLUSTER_T):
                feature_map[int(name[len(_CLUSTER_T):])] = np.array(arr, dtype=np.float64)
    return state, opt, feature_map, meta


def train(state, molecules, data_split, cfg, seed=0, out_dir=None, resume=False, stop_after=None):
    """Run (or continue) one training run; returns a TrainResult.

    ``state`` is a freshly initialized model; on ``resume=True`` its
    parameters are replaced by the ones stored in ``out_dir/last.ckpt``.
    ``stop_after`` limits how many additional epochs this call executes
    (simulating an interruption); the run can be continued later with
    ``resume=True`` and produces the same history as an uninterrupted run.

    Per epoch: rebuild hierarchies from the feature snapshot, sweep
    shuffled mini-batches (forward, loss, backward, AdamW step), validate
    with evaluation-time clustering, schedule, and checkpoint.  Raises
    NumericError with epoch/batch coordinates if the loss goes non-finite.
    """
    _validate_split(molecules, data_split)
    cfg, steps_per_epoch = _resolve(cfg, len(data_split.train))
    seed = int(seed)
    cluster_cfg = replace(cfg.cluster, rng_seed=cfg.cluster.rng_seed + seed)
    variant = state.config.variant
    train_idx = list(data_split.train)
    val_idx = list(data_split.val)
    val_mols = [molecules[i] for i in val_idx]
    val_e = np.array([molecules[i].energy for i in val_idx])
    val_f = None
    if all(molecules[i].forces is not None for i in val_idx):
        val_f = [molecules[i].forces for i in val_idx]

    history = []
    best_val = math.inf
    best_epoch = -1
    best_tensors = {n: p.data.copy() for n, p in state.params.items()}
    stagnation = 0
    start_epoch = 0
    feature_map = None  # built epoch >= 1; None means element-level bootstrap
    cluster_epoch = -1

    best_path = last_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        best_path = os.path.join(out_dir, "best.ckpt")
        last_path = os.path.join(out_dir, "last.ckpt")

    if resume:
        if last_path is None or not os.path.exists(last_path):
            raise DataError(f"resume: no checkpoint at {last_path!r}")
        state, opt, feature_map, meta = _restore(last_path, cfg, state.config)
        history = list(meta["history"])
        best_val = float(meta["best_val"])
        best_epoch = int(meta["best_epoch"])
        stagnation = int(meta["stagnation"])
        cluster_epoch = int(meta["cluster_epoch"])
        start_epoch = int(meta["epoch"]) + 1
        if os.path.exists(best_path):
            _, best_store, _ = load_checkpoint(best_path)
            best_tensors = {n: np.array(best_store[n]) for n in state.params}
        else:
            best_tensors = {n: p.data.copy() for n, p in state.params.items()}
    else:
        state.freeze(cfg.freeze_prefixes)
        opt = OptimizerState.for_params(state.trainable())

    trainable = state.trainable()
    metrics_path = os.path.join(out_dir, "metrics.jsonl") if out_dir else None
    if metrics_path and not resume and os.path.exists(metrics_path):
        os.remove(metrics_path)

    stopped_early = False
    epochs_run = 0
    for epoch in range(start_epoch, cfg.max_epochs):
        if stop_after is not None and epochs_run >= stop_after:
            break
        tic = time.monotonic()

        if variant == "mcgm" and epoch >= 1:
            feature_map = _snapshot_features(
                state, molecules, train_idx, feature_map if cluster_epoch >= 1 else None,
                cluster_epoch, cluster_cfg, state.config.n_levels,
            )
            cluster_epoch = epoch

        order = np.random.default_rng((seed, _STREAM_SHUFFLE, epoch)).permutation(len(train_idx))
        if cfg.scheduler == "plateau":
            epoch_lr = lr_at(0, [h["val_mae_e"] for h in history], cfg)
        loss_sum = 0.0
        for b, rows in enumerate(_chunks(list(order), cfg.batch_size)):
            ids = [train_idx[r] for r in rows]
            mols = [molecules[i] for i in ids]
            batch = make_batch(mols)
            hier = None
            if variant == "mcgm":
                feats = None
                if feature_map is not None:
                    feats = np.concatenate([feature_map[i] for i in ids])
                hier = _training_hierarchy(
                    batch, feats, epoch, np.asarray(ids), cluster_cfg, state.config.n_levels
                )
            try:
                loss = _loss_and_grads(state, batch, hier, cfg.loss)
            except NumericError as err:
                raise NumericError(f"epoch {epoch}, batch {b}: {err}") from err
            if not math.isfinite(loss):
                raise NumericError(f"non-finite training loss at epoch {epoch}, batch {b}")
            grads = {
                n: (p.grad if p.grad is not None else np.zeros_like(p.data))
                for n, p in trainable.items()
            }
            if cfg.max_grad_norm is not None:
                _clip_gradients(grads, cfg.max_grad_norm)
            step = epoch * steps_per_epoch + b
            lr = epoch_lr if cfg.scheduler == "plateau" else lr_at(step, None, cfg)
            try:
                optimizer_step(opt, trainable, grads, lr, cfg.weight_decay)
            except NumericError as err:
                raise NumericError(f"epoch {epoch}, batch {b}: {err}") from err
            loss_sum += loss * batch.n_graphs

        pred_e, pred_f = predict_molecules(
            state, val_mols, cluster_cfg, with_forces=val_f is not None,
            graph_keys=np.asarray(val_idx),
        )
        val_mae_e = mae_energies(pred_e, val_e)
        val_mae_f = mae_forces(pred_f, val_f) if val_f is not None else None
        record = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": loss_sum / len(train_idx),
            "val_mae_e": val_mae_e,
            "val_mae_f": val_mae_f,
            "wall_time_s": time.monotonic() - tic,
        }
        history.append(record)
        if metrics_path:
            with open(metrics_path, "a") as fh:
                fh.write(json.dumps(record) + "\n")

        improved = val_mae_e < best_val - IMPROVEMENT_EPS
        if improved:
            best_val = val_mae_e
            best_epoch = epoch
            best_tensors = {n: p.data.copy() for n, p in state.params.items()}
            stagnation = 0
        else:
            stagnation += 1

        if out_dir is not None:
            meta = {
                "seed": seed,
                "epoch": epoch,
                "train_config": cfg.as_dict(),
                "history": history,
                "optimizer_step": opt.step,
                "best_val": best_val,
                "best_epoch": best_epoch,
                "stagnation": stagnation,
                "cluster_epoch": cluster_epoch,
            }
            _write_checkpoint(last_path, state, opt, feature_map, dict(meta, kind="last"))
            if improved:
                tmp = best_path + ".tmp"
                save_checkpoint(
                    tmp, state.config, best_tensors,
                    meta={"kind": "best", "seed": seed, "epoch": epoch,
                          "val_mae_e": best_val, "train_config": cfg.as_dict()},
                )
                os.replace(tmp, best_path)

        epochs_run += 1
        if stagnation >= cfg.early_stop_patience:
            stopped_early = True
            break

    return TrainResult(
        history=history,
        best_val=best_val,
        best_epoch=best_epoch,
        best_tensors=best_tensors,
        state=state,
        optimizer=opt,
        stopped_early=stopped_early,
        best_path=best_path,
        last_path=last_path,
    )


# ------------------------------------------------------------- evaluation


def evaluate(checkpoint, molecules, mode=None, batch_size=64):
    """MAE report for a checkpoint on a molecule list.

    ``checkpoint`` is a file path or a (config, tensors, meta) triple.
    ``mode``: None picks force reporting automatically (forces whenever
    every molecule has force targets); "energy" skips forces; "forces"
    requires force targets.  Energies are meV, force components meV/Å.
    """
    if isinstance(checkpoint, (str, os.PathLike)):
        config, tensors, meta = load_checkpoint(os.fspath(checkpoint))
    else:
        config, tensors, meta = checkpoint
    if not molecules:
        raise ContractError("evaluate: empty molecule list")
    if any(m.energy is None for m in molecules):
        raise DataError("evaluate: every molecule needs an energy target")
    max_given = max(int(m.numbers.max()) for m in molecules)
    if max_given > config.max_z:
        raise ContractError(
            f"evaluate: data contains element {max_given} but the checkpoint "
            f"was trained with max_z={config.max_z}"
        )
    state = state_from_tensors(config, tensors)
    have_forces = all(m.forces is not None for m in molecules)
    if mode is None:
        want_forces = have_forces
    elif mode == "energy":
        want_forces = False
    elif mode == "forces":
        if not have_forces:
            raise DataError("evaluate: force metrics requested but targets are missing")
        want_forces = True
    else:
        raise ContractError(f"evaluate: mode must be None, 'energy' or 'forces', got {mode!r}")
    cluster_cfg = ClusterConfig()
    if isinstance(meta, dict) and "train_config" in meta:
        cluster_cfg = TrainConfig.from_dict(meta["train_config"]).cluster
    pred_e, pred_f = predict_molecules(
        state, molecules, cluster_cfg, with_forces=want_forces, batch_size=batch_size
    )
    out = {
        "n_molecules": len(molecules),
        "mae_e": mae_energies(pred_e, [m.energy for m in molecules]),
        "mae_f": mae_forces(pred_f, [m.forces for m in molecules]) if want_forces else None,
    }
    return out


def aggregate_stats(values):
    """Mean and population standard deviation of per-seed metrics."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise ContractError("aggregate_stats: no values")
    return float(arr.mean()), float(arr.std(ddof=0))


def format_mean_std(values, digits=3):
    mean, std = aggregate_stats(values)
    return f"{mean:.{digits}f} ± {std:.{digits}f}"
