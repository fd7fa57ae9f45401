"""Hierarchical energy readout, forces, and training losses.

Two separate two-layer heads (linear, shifted softplus, linear) decode
per-atom and per-cluster energy contributions; per-graph totals are the
segment sums of both, so the reported energy always equals the atomic
plus cluster partial sums exactly as computed. Forces are the negative
gradient of the summed energy with respect to atomic positions, obtained
from the reverse-mode engine.

Losses: ``energy_l1`` is the mean absolute per-graph energy error;
``energy_force_mse`` is the weighted sum 0.01 * mean squared energy error
+ 0.99 * mean squared per-component force error. The force residual
enters the second mode as a constant (the engine does not differentiate
through gradients), so parameter updates in that mode flow through the
energy term; the loss value itself reports both terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DataError, NumericError
from .model import mcgm_forward

__all__ = [
    "LOSS_MODES",
    "Prediction",
    "head_energy",
    "energy",
    "forces",
    "loss_value",
    "predict_batch",
    "format_predictions",
]

LOSS_MODES = ("energy_l1", "energy_force_mse")

LAMBDA_E = 0.01
LAMBDA_F = 0.99


@dataclass
class Prediction:
    """Per-graph energies (with the atomic/cluster split) and optional forces."""

    energy: np.ndarray
    energy_atomic: np.ndarray
    energy_cluster: np.ndarray
    forces: np.ndarray | None = None


def head_energy(features, state, prefix):
    """Two-layer readout head mapping feature rows to one scalar per row."""
    first = state.affine(prefix + ".1")
    second = state.affine(prefix + ".2")
    hidden = ad.shifted_softplus(ad.linear(features, first.weight, first.bias))
    return ad.linear(hidden, second.weight, second.bias)


def energy(h_atoms, h_clusters, batch, graph_of_cluster, state):
    """Per-graph energy Values: (total, atomic part, cluster part).

    The atomic head maps every atom to a contribution summed per graph;
    the cluster head does the same over the coarsest-level clusters. A
    None ``h_clusters`` (baseline variant) contributes exact zeros.
    """
    if not np.all(np.isfinite(h_atoms.data)):
        raise NumericError("energy: atom features are not finite")
    e_atoms = head_energy(h_atoms, state, "atom_head")
    e_atomic = ad.segment_sum(e_atoms, batch.graph_index, batch.n_graphs)
    if h_clusters is None:
        e_cluster = ad.Value(np.zeros((batch.n_graphs, 1)))
    else:
        e_per_cluster = head_energy(h_clusters, state, "cluster_head")
        e_cluster = ad.segment_sum(e_per_cluster, graph_of_cluster, batch.n_graphs)
    return ad.add(e_atomic, e_cluster), e_atomic, e_cluster


def forces(e_total, positions):
    """Negative gradient of the summed per-graph energies w.r.t. positions.

    ``positions`` must be the gradient-tracked Value the energies were
    built from. Its ``grad`` slot is used as scratch and cleared before
    returning; other leaves of the graph keep whatever the backward pass
    accumulated, so pure inference should run on a detached parameter
    state (see ModelState.detached).
    """
    if not positions.requires_grad:
        raise ContractError("forces: positions are not gradient-tracked")
    total = ad.reduce_sum(e_total)
    positions.grad = None
    ad.backward(total)
    grad = positions.grad if positions.grad is not None else np.zeros_like(positions.data)
    positions.grad = None
    return ad.Value(-grad)


def loss_value(e_total, batch, mode, forces_pred=None):
    """Scalar training loss for one batch; differentiable in ``e_total``."""
    if mode not in LOSS_MODES:
        raise ContractError(f"loss: mode must be one of {LOSS_MODES}, got {mode!r}")
    if batch.energies is None:
        raise DataError("loss: batch carries no energy targets")
    targets = ad.Value(batch.energies.reshape(-1, 1))
    residual = ad.sub(e_total, targets)
    if mode == "energy_l1":
        return ad.reduce_mean(ad.absolute(residual))
    if batch.forces is None:
        raise DataError("loss: energy_force_mse requires force targets")
    if forces_pred is None:
        raise DataError("loss: energy_force_mse requires predicted forces")
    e_term = ad.reduce_mean(ad.mul(residual, residual))
    f_pred = np.asarray(getattr(forces_pred, "data", forces_pred))
    f_mse = float(np.mean((f_pred - batch.forces) ** 2))
    return ad.add(ad.scale(e_term, LAMBDA_E), ad.Value(np.array([LAMBDA_F * f_mse])))


def predict_batch(state, batch, hierarchy, with_forces=False):
    """Inference on a frozen parameter view; returns a Prediction.

    Gradients (when forces are requested) reach atomic positions only:
    the forward runs on a detached copy of the parameters.
    """
    frozen = state.detached()
    positions = ad.Value(batch.positions, requires_grad=with_forces)
    h_atoms, h_clusters = mcgm_forward(batch, hierarchy, frozen, positions=positions)
    graph_of_cluster = hierarchy.levels[-1].graph_of_cluster if hierarchy is not None else None
    e_total, e_atomic, e_cluster = energy(h_atoms, h_clusters, batch, graph_of_cluster, frozen)
    out_forces = forces(e_total, positions).data if with_forces else None
    return Prediction(
        energy=e_total.data.reshape(-1).copy(),
        energy_atomic=e_atomic.data.reshape(-1).copy(),
        energy_cluster=e_cluster.data.reshape(-1).copy(),
        forces=out_forces,
    )


def format_predictions(pred, batch, ids=None, with_forces=False):
    """Text dump: one line per graph, optionally followed by force rows.

    Grammar: ``<id> <energy> <energy_atomic> <energy_cluster>`` per graph;
    with forces, each graph line is followed by one
    ``F <atom_index> <fx> <fy> <fz>`` line per atom of that graph.
    """
    if ids is None:
        ids = range(len(pred.energy))
    lines = []
    for g, gid in enumerate(ids):
        lines.append(
            f"{gid} {pred.energy[g]:.10g} {pred.energy_atomic[g]:.10g} {pred.energy_cluster[g]:.10g}"
        )
        if with_forces and pred.forces is not None:
            for i in np.nonzero(batch.graph_index == g)[0]:
                fx, fy, fz = pred.forces[i]
                lines.append(f"F {i} {fx:.10g} {fy:.10g} {fz:.10g}")
    return "\n".join(lines) + "\n"
