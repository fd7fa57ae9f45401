"""Multi-level cluster hierarchy and star-topology exchange operations.

A hierarchy stacks cluster assignments: level 1 groups atoms by element
within each graph, and every higher level clusters the pooled features of
the level below it, so node counts shrink until each graph collapses to a
single coarse node.

Information crosses levels through three operations over the star topology
(every member node is linked only to its cluster center):

* ``aggregate`` pools member rows (features concatenated with a radial
  basis encoding of the member-to-centroid distance) and applies one
  affine map to the pooled row.
* ``disseminate`` broadcasts each cluster row back to its members through
  the same concatenation and an affine map.
* ``residual_fuse`` adds the disseminated update onto the original
  features at the finest level.

Centroid positions are differentiable functions of member positions, so
energy gradients flow back to atomic coordinates through every level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .clustering import ClusterAssignment, element_clusters, kmeans_cluster, random_clusters
from .errors import ContractError
from .geometry import RbfSpec, rbf_expand

__all__ = [
    "Affine",
    "Hierarchy",
    "build_hierarchy",
    "star_rbf",
    "aggregate",
    "aggregate_pooled",
    "disseminate",
    "disseminate_from",
    "residual_fuse",
]


@dataclass
class Affine:
    """One affine map ``rows @ weight + bias``."""

    weight: ad.Value
    bias: ad.Value


def first_members(assign, n_clusters):
    """Index of each cluster's lowest-numbered member node."""
    fm = np.zeros(n_clusters, dtype=np.int64)
    fm[assign[::-1]] = np.arange(assign.size - 1, -1, -1)
    return fm


@dataclass
class Hierarchy:
    """Cluster assignments for levels 1..L of one batch.

    ``levels[0]`` maps atoms to element clusters; ``levels[i]`` maps the
    cluster nodes of level ``i`` to the clusters of level ``i + 1``. The
    star edge count of a level therefore equals the node count of the
    level below it.

    A graph whose cluster count has already collapsed to one stops
    coarsening: its clusters at every higher level are marked
    ``passthrough`` and must mirror their single member rather than apply
    the exchange maps, so a molecule's predictions never depend on how
    deep its batchmates force the hierarchy to grow.
    """

    levels: list[ClusterAssignment]
    passthrough: list | None = None
    members: list | None = None

    def __post_init__(self):
        if self.passthrough is None:
            self.passthrough = [np.zeros(lvl.n_clusters, dtype=bool) for lvl in self.levels]
        if self.members is None:
            self.members = [first_members(lvl.assign, lvl.n_clusters) for lvl in self.levels]

    @property
    def n_levels(self):
        return len(self.levels)

    @property
    def level_sizes(self):
        """Cluster count per level, finest first."""
        return [lvl.n_clusters for lvl in self.levels]

    def star_edge_count(self, level):
        """Member-to-center edge count at ``level`` (1-indexed)."""
        if not 1 <= level <= len(self.levels):
            raise ContractError(
                f"star_edge_count: level must be in 1..{len(self.levels)}, got {level}"
            )
        return self.levels[level - 1].assign.size


def _pool_rows(rows, assign, n_clusters):
    out = np.zeros((n_clusters, rows.shape[1]))
    np.add.at(out, assign, rows)
    counts = np.bincount(assign, minlength=n_clusters).astype(np.float64)
    return out / np.maximum(counts, 1.0)[:, None]


def build_hierarchy(batch, features, n_levels, cfg, epoch=0, graph_keys=None):
    """Stack up to ``n_levels`` cluster levels over one batch.

    Level 1 always comes from per-graph element grouping. Each level
    above clusters the previous level's nodes on their pooled features
    (plain segment means of member features) using the strategy in
    ``cfg``. Construction stops early once every graph is down to a
    single cluster, so the returned hierarchy may be shallower than
    requested.
    """
    if n_levels < 1:
        raise ContractError(f"build_hierarchy: n_levels must be >= 1, got {n_levels}")
    feats = np.asarray(getattr(features, "data", features), dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] != batch.n_atoms:
        raise ContractError(
            f"build_hierarchy: features must be [n_atoms x d], got shape {feats.shape}"
        )
    if graph_keys is None:
        graph_keys = np.arange(batch.n_graphs)

    levels = [element_clusters(batch)]
    passthrough = [np.zeros(levels[0].n_clusters, dtype=bool)]
    node_feats = feats
    node_pos = batch.positions
    for _ in range(1, n_levels):
        prev = levels[-1]
        if prev.n_clusters == batch.n_graphs:
            break  # every graph already holds a single cluster
        node_feats = _pool_rows(node_feats, prev.assign, prev.n_clusters)
        node_pos = prev.centroid_pos
        graph_index = prev.graph_of_cluster
        if cfg.strategy == "kmeanspp":
            nxt = kmeans_cluster(
                node_feats, node_pos, graph_index, batch.n_graphs, cfg,
                epoch=epoch, graph_keys=graph_keys,
            )
        else:
            nxt = random_clusters(
                node_pos, graph_index, batch.n_graphs, cfg,
                epoch=epoch, graph_keys=graph_keys,
                balanced=cfg.strategy == "random_balanced",
            )
        # Clusters of graphs that were already down to one cluster only
        # mirror their single member from here on.
        prev_counts = np.bincount(prev.graph_of_cluster, minlength=batch.n_graphs)
        passthrough.append(prev_counts[nxt.graph_of_cluster] == 1)
        levels.append(nxt)
    return Hierarchy(levels=levels, passthrough=passthrough)


def _check_cover(features, assign, op):
    if features.data.ndim != 2:
        raise ContractError(f"{op}: features must be 2-D, got shape {tuple(features.data.shape)}")
    if assign.assign.size != features.data.shape[0]:
        raise ContractError(
            f"{op}: assignment covers {assign.assign.size} rows "
            f"but features have {features.data.shape[0]}"
        )


def star_rbf(positions, assign, spec):
    """Centroid positions and member-to-centroid RBF rows for one level.

    Returns ``(centroid_pos, edge_rbf)`` where ``centroid_pos`` is the
    differentiable member-mean position of every cluster and ``edge_rbf``
    holds one radial-basis row per member node. Both carry gradients back
    to ``positions``.
    """
    k = assign.n_clusters
    centroid_pos = ad.segment_mean(positions, assign.assign, k)
    diff = ad.sub(positions, ad.gather_rows(centroid_pos, assign.assign))
    edge_rbf = rbf_expand(ad.row_norm(diff), spec)
    return centroid_pos, edge_rbf


def aggregate_pooled(features, edge_rbf, assign, weights):
    """Pool ``[features ‖ edge_rbf]`` per cluster, then apply the affine map."""
    _check_cover(features, assign, "aggregate")
    z = ad.concat_features(features, edge_rbf)
    pooled = ad.segment_mean(z, assign.assign, assign.n_clusters)
    return ad.linear(pooled, weights.weight, weights.bias)


def aggregate(features, positions, assign, spec, weights):
    """Fine-to-coarse exchange over the star topology.

    Every member row is concatenated with the RBF encoding of its distance
    to the cluster centroid; the per-cluster mean of those rows goes
    through one affine map (pool first, affine second). Returns the
    cluster features and the differentiable centroid positions.
    """
    _check_cover(features, assign, "aggregate")
    centroid_pos, edge_rbf = star_rbf(positions, assign, spec)
    return aggregate_pooled(features, edge_rbf, assign, weights), centroid_pos


def disseminate_from(cluster_features, edge_rbf, assign, weights):
    """Broadcast cluster rows to members using precomputed RBF rows."""
    if cluster_features.data.shape[0] != assign.n_clusters:
        raise ContractError(
            f"disseminate: {cluster_features.data.shape[0]} cluster rows "
            f"but assignment has {assign.n_clusters} clusters"
        )
    z = ad.concat_features(ad.gather_rows(cluster_features, assign.assign), edge_rbf)
    return ad.linear(z, weights.weight, weights.bias)


def disseminate(cluster_features, centroid_pos, positions, assign, spec, weights):
    """Coarse-to-fine exchange over the star topology.

    Every member receives its cluster's row concatenated with the RBF
    encoding of the member-to-centroid distance, through one affine map.
    """
    if positions.data.shape[0] != assign.assign.size:
        raise ContractError(
            f"disseminate: assignment covers {assign.assign.size} rows "
            f"but positions have {positions.data.shape[0]}"
        )
    diff = ad.sub(positions, ad.gather_rows(centroid_pos, assign.assign))
    edge_rbf = rbf_expand(ad.row_norm(diff), spec)
    return disseminate_from(cluster_features, edge_rbf, assign, weights)


def residual_fuse(base, update):
    """Elementwise residual sum of same-shape feature blocks."""
    return ad.add(base, update)
