"""Per-graph clustering: element level, K-means++ levels, random ablations.

All randomness flows through numpy Generators seeded by
``(global_seed, stream, epoch, graph_key)`` so that re-clustering is
reproducible and independent of how molecules are batched together.

Random draw protocol (shared by the in-tree implementation and any oracle
that wants draw-for-draw agreement):

* first K-means++ centroid: ``rng.integers(n)``
* each next centroid: ``u = rng.random()`` inverted through the cumulative
  D^2 distribution (uniform ``rng.integers(n)`` if all D^2 vanish)
* empty-centroid repair: ``rng.integers(n)`` picking a member row
* random strategy: ``rng.integers(k, size=n)`` then, per empty id in
  ascending order, ``rng.integers(len(donors))`` over donor nodes in id order
* balanced strategy: ``rng.permutation(n)`` split into contiguous chunks
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import ContractError, NumericError

_STREAM_KMEANS = 31
_STREAM_RANDOM = 37

STRATEGIES = ("kmeanspp", "random", "random_balanced")


@dataclass
class ClusterConfig:
    reduction_ratio: int = 2
    tolerance: float = 1e-4
    max_iters: int = 10
    strategy: str = "kmeanspp"
    rng_seed: int = 0
    floor_counts: bool = False  # use max(1, floor(n/r)) instead of ceil(n/r)

    def __post_init__(self):
        if int(self.reduction_ratio) != self.reduction_ratio or self.reduction_ratio < 2:
            raise ContractError(f"reduction_ratio must be an integer >= 2, got {self.reduction_ratio}")
        self.reduction_ratio = int(self.reduction_ratio)
        if not self.tolerance > 0:
            raise ContractError(f"tolerance must be positive, got {self.tolerance}")
        if self.max_iters < 1:
            raise ContractError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.strategy not in STRATEGIES:
            raise ContractError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"ClusterConfig: unknown keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class ClusterAssignment:
    """Node -> cluster map for one level, plus per-cluster metadata."""

    assign: np.ndarray
    n_clusters: int
    centroid_pos: np.ndarray
    graph_of_cluster: np.ndarray

    @property
    def sizes(self):
        return np.bincount(self.assign, minlength=self.n_clusters)


def target_cluster_count(n_nodes, reduction_ratio, floor_counts=False):
    """Clusters for one graph: max(1, ceil(n/r)), or the floor variant."""
    if n_nodes < 1:
        raise ContractError(f"target_cluster_count: n_nodes must be >= 1, got {n_nodes}")
    if floor_counts:
        return max(1, n_nodes // reduction_ratio)
    return max(1, -(-n_nodes // reduction_ratio))


def _centroid_positions(positions, assign, k):
    out = np.zeros((k, 3))
    np.add.at(out, assign, positions)
    counts = np.bincount(assign, minlength=k).astype(np.float64)
    return out / np.maximum(counts, 1.0)[:, None]


def element_clusters(batch):
    """Level-1 grouping: one cluster per distinct element per graph."""
    assign = np.empty(batch.n_atoms, dtype=np.int64)
    graph_of_cluster = []
    offset = 0
    for g in range(batch.n_graphs):
        nodes = np.nonzero(batch.graph_index == g)[0]
        elements = np.unique(batch.numbers[nodes])  # ascending Z
        rank = {int(z): i for i, z in enumerate(elements)}
        for i in nodes:
            assign[i] = offset + rank[int(batch.numbers[i])]
        graph_of_cluster.extend([g] * elements.size)
        offset += elements.size
    k = offset
    return ClusterAssignment(
        assign=assign,
        n_clusters=k,
        centroid_pos=_centroid_positions(batch.positions, assign, k),
        graph_of_cluster=np.array(graph_of_cluster, dtype=np.int64),
    )


def kmeanspp_seed(features, k, rng):
    """D^2-weighted seeding over the rows of ``features``."""
    n = features.shape[0]
    if k > n:
        raise ContractError(f"kmeanspp_seed: k={k} exceeds {n} rows")
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = rng.integers(n)
    d2 = ((features - features[chosen[0]]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            chosen[j] = rng.integers(n)
        else:
            u = rng.random()
            idx = int(np.searchsorted(np.cumsum(d2 / total), u, side="right"))
            chosen[j] = min(idx, n - 1)
        d2 = np.minimum(d2, ((features - features[chosen[j]]) ** 2).sum(axis=1))
    return features[chosen].copy()


def _assign_nearest(features, centroids):
    # ties break to the lowest centroid index (argmin convention)
    d2 = ((features[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)
    return d2.argmin(axis=1)


def lloyd(features, k, rng, tolerance, max_iters):
    """K-means++ init then Lloyd iterations; returns per-iteration objective.

    Stop order inside one iteration: assignment, centroid update, empty
    repair, single-node early stop, then the movement tolerance. If the
    iteration budget strands an empty cluster, a deterministic finalization
    reassigns the first member of the largest cluster to each empty id.
    """
    n = features.shape[0]
    centroids = kmeanspp_seed(features, k, rng)
    assign = np.zeros(n, dtype=np.int64)
    history = []
    for _ in range(max_iters):
        old = centroids.copy()
        assign = _assign_nearest(features, centroids)
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, features)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        for empty in np.nonzero(~nonempty)[0]:
            centroids[empty] = features[rng.integers(n)]
        history.append(float(((features - centroids[assign]) ** 2).sum()))
        if np.all(counts == 1):
            break
        if np.linalg.norm(centroids - old) <= tolerance:
            break
    counts = np.bincount(assign, minlength=k)
    for empty in np.nonzero(counts == 0)[0]:
        donor = int(np.argmax(counts))
        victim = int(np.nonzero(assign == donor)[0][0])
        assign[victim] = empty
        counts[donor] -= 1
        counts[empty] += 1
    return assign, centroids, history


def kmeans_cluster(features, positions, graph_index, n_graphs, cfg, epoch=0, graph_keys=None):
    """Per-graph K-means (Alg.-style): k_g = target count, Lloyd, repairs."""
    features = np.asarray(features, dtype=np.float64)
    if not np.all(np.isfinite(features)):
        raise NumericError("kmeans_cluster: non-finite features")
    if graph_keys is None:
        graph_keys = np.arange(n_graphs)
    assign = np.empty(features.shape[0], dtype=np.int64)
    graph_of_cluster = []
    offset = 0
    for g in range(n_graphs):
        nodes = np.nonzero(graph_index == g)[0]
        k = target_cluster_count(nodes.size, cfg.reduction_ratio, cfg.floor_counts)
        rng = np.random.default_rng(
            (int(cfg.rng_seed), _STREAM_KMEANS, int(epoch), int(graph_keys[g]))
        )
        local, _, _ = lloyd(features[nodes], k, rng, cfg.tolerance, cfg.max_iters)
        assign[nodes] = local + offset
        graph_of_cluster.extend([g] * k)
        offset += k
    return ClusterAssignment(
        assign=assign,
        n_clusters=offset,
        centroid_pos=_centroid_positions(np.asarray(positions), assign, offset),
        graph_of_cluster=np.array(graph_of_cluster, dtype=np.int64),
    )


def random_clusters(positions, graph_index, n_graphs, cfg, epoch=0, graph_keys=None, balanced=False):
    """Ablation strategies: uniform assignment (with repair) or balanced chunks."""
    if graph_keys is None:
        graph_keys = np.arange(n_graphs)
    positions = np.asarray(positions)
    assign = np.empty(positions.shape[0], dtype=np.int64)
    graph_of_cluster = []
    offset = 0
    for g in range(n_graphs):
        nodes = np.nonzero(graph_index == g)[0]
        n = nodes.size
        k = target_cluster_count(n, cfg.reduction_ratio, cfg.floor_counts)
        rng = np.random.default_rng(
            (int(cfg.rng_seed), _STREAM_RANDOM, int(epoch), int(graph_keys[g]))
        )
        if balanced:
            perm = rng.permutation(n)
            sizes = np.full(k, n // k)
            sizes[: n % k] += 1
            local = np.empty(n, dtype=np.int64)
            start = 0
            for cid, size in enumerate(sizes):
                local[perm[start : start + size]] = cid
                start += size
        else:
            local = rng.integers(0, k, size=n)
            counts = np.bincount(local, minlength=k)
            for empty in np.nonzero(counts == 0)[0]:
                donors = np.nonzero(counts[local] >= 2)[0]  # nodes in clusters of size >= 2
                victim = int(donors[rng.integers(donors.size)])
                counts[local[victim]] -= 1
                local[victim] = empty
                counts[empty] += 1
        assign[nodes] = local + offset
        graph_of_cluster.extend([g] * k)
        offset += k
    return ClusterAssignment(
        assign=assign,
        n_clusters=offset,
        centroid_pos=_centroid_positions(positions, assign, offset),
        graph_of_cluster=np.array(graph_of_cluster, dtype=np.int64),
    )
