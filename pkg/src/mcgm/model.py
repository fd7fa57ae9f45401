"""Invariant message-passing backbone with hierarchical cluster exchange.

The backbone embeds atomic numbers, runs continuous-filter message-passing
layers over the radial neighbor graph, and (in the ``mcgm`` variant)
exchanges information with the cluster hierarchy around every layer:

* before the first layer, cluster features are initialized by a bottom-up
  aggregation pass through all levels;
* at each layer, atoms receive the layer's message-passing update plus a
  dissemination from their level-1 cluster, level-1 clusters are refreshed
  by aggregation from the pre-update atom features, and every higher level
  is refreshed by aggregation from the just-updated level below;
* after the last layer, a top-down dissemination cascade walks from the
  coarsest level back to the atoms, replacing intermediate cluster
  features and entering the atomic features through a residual sum.

Levels above a graph's bottom-out point (where it is already a single
cluster) are pass-through: they mirror their single member instead of
applying the exchange maps, so predictions for a molecule are identical
whether it is processed alone or batched with deeper molecules.

All learnable tensors live in a flat, insertion-ordered parameter map so
checkpoints are a plain name -> array dump. The ``baseline`` variant keeps
the identical parameter set (so runs differ only in which weights are
active) but skips every cluster exchange.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .errors import ContractError, DataError, NumericError
from .geometry import (
    DEFAULT_N_RBF_ATOM,
    DEFAULT_N_RBF_CLUSTER,
    RbfSpec,
    edge_distances,
    neighbor_list,
    rbf_expand,
)
from .hierarchy import (
    Affine,
    aggregate_pooled,
    disseminate_from,
    residual_fuse,
    star_rbf,
)

__all__ = [
    "BackboneConfig",
    "LayerWeights",
    "ModelState",
    "init_model",
    "embed",
    "interaction",
    "mcgm_forward",
    "save_checkpoint",
    "load_checkpoint",
    "state_tensors",
    "state_from_tensors",
]

VARIANTS = ("mcgm", "baseline")

_STREAM_INIT = 17

CHECKPOINT_MAGIC = b"MCGM"
CHECKPOINT_VERSION = 1


@dataclass
class BackboneConfig:
    """Architecture hyperparameters; defaults follow the reference recipe."""

    hidden_dim: int = 64
    n_layers: int = 3
    atom_cutoff: float = 6.0
    cluster_cutoff: float = 4.0
    n_rbf_atom: int = DEFAULT_N_RBF_ATOM
    n_rbf_cluster: int = DEFAULT_N_RBF_CLUSTER
    n_levels: int = 3
    max_z: int = 10
    variant: str = "mcgm"

    def __post_init__(self):
        for name in ("hidden_dim", "n_layers", "n_rbf_atom", "n_rbf_cluster", "n_levels", "max_z"):
            if int(getattr(self, name)) != getattr(self, name) or getattr(self, name) < 1:
                raise ContractError(f"BackboneConfig: {name} must be an integer >= 1")
            setattr(self, name, int(getattr(self, name)))
        if not self.atom_cutoff > 0 or not self.cluster_cutoff > 0:
            raise ContractError("BackboneConfig: cutoffs must be positive")
        if self.variant not in VARIANTS:
            raise ContractError(f"BackboneConfig: variant must be one of {VARIANTS}, got {self.variant!r}")

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"BackboneConfig: unknown keys {sorted(unknown)}")
        return cls(**d)

    @property
    def head_dim(self):
        return max(1, self.hidden_dim // 2)


@dataclass
class LayerWeights:
    """Per-layer weight bundle for one message-passing layer."""

    value: Affine
    filter1: Affine
    filter2: Affine
    update1: Affine
    update2: Affine


class ModelState:
    """Flat, insertion-ordered map of named parameters plus the config."""

    def __init__(self, config, params):
        self.config = config
        self.params = params
        for name, p in params.items():
            if not np.all(np.isfinite(p.data)):
                raise NumericError(f"ModelState: parameter {name!r} is not finite")

    def __getitem__(self, name):
        try:
            return self.params[name]
        except KeyError:
            raise ContractError(f"ModelState: unknown parameter {name!r}") from None

    def affine(self, prefix):
        return Affine(weight=self[prefix + ".W"], bias=self[prefix + ".b"])

    def layer(self, l):
        base = f"layers.{l}"
        return LayerWeights(
            value=self.affine(f"{base}.value"),
            filter1=self.affine(f"{base}.filter1"),
            filter2=self.affine(f"{base}.filter2"),
            update1=self.affine(f"{base}.update1"),
            update2=self.affine(f"{base}.update2"),
        )

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def freeze(self, prefixes):
        """Stop gradient tracking (and optimization) for matching parameters."""
        for name, p in self.params.items():
            if any(name.startswith(prefix) for prefix in prefixes):
                p.requires_grad = False

    def trainable(self):
        return {n: p for n, p in self.params.items() if p.requires_grad}

    def detached(self):
        """A frozen view sharing parameter storage but tracking no gradients.

        Forward passes on the view never route gradients into the
        parameters, so force computation during inference touches atomic
        positions alone.
        """
        view = ModelState.__new__(ModelState)
        view.config = self.config
        view.params = {name: ad.Value(p.data) for name, p in self.params.items()}
        return view

    @property
    def n_parameters(self):
        return sum(p.data.size for p in self.params.values())


def _xavier(rng, d_in, d_out):
    bound = np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-bound, bound, size=(d_in, d_out))


def init_model(config, seed=0):
    """Draw a fresh parameter set: Xavier-uniform weights, zero biases.

    Both variants allocate the identical parameter set in the identical
    order, so a baseline run and an MCGM run from the same seed start from
    the same numbers and differ only in which weights the forward uses.
    """
    rng = np.random.default_rng((int(seed), _STREAM_INIT))
    d = config.hidden_dim
    cdim = d + config.n_rbf_cluster
    params: dict[str, Parameter] = {}

    def affine(prefix, d_in, d_out):
        params[prefix + ".W"] = Parameter(prefix + ".W", _xavier(rng, d_in, d_out))
        params[prefix + ".b"] = Parameter(prefix + ".b", np.zeros(d_out))

    params["embedding"] = Parameter("embedding", _xavier(rng, config.max_z, d))
    for l in range(config.n_layers):
        affine(f"layers.{l}.value", d, d)
        affine(f"layers.{l}.filter1", config.n_rbf_atom, d)
        affine(f"layers.{l}.filter2", d, d)
        affine(f"layers.{l}.update1", d, d)
        affine(f"layers.{l}.update2", d, d)
        affine(f"layers.{l}.dis", cdim, d)
        for lev in range(1, config.n_levels + 1):
            affine(f"layers.{l}.agg.{lev}", cdim, d)
    for lev in range(1, config.n_levels + 1):
        affine(f"init_agg.{lev}", cdim, d)
    for lev in range(1, config.n_levels + 1):
        affine(f"final_dis.{lev}", cdim, d)
    affine("atom_head.1", d, config.head_dim)
    affine("atom_head.2", config.head_dim, 1)
    affine("cluster_head.1", d, config.head_dim)
    affine("cluster_head.2", config.head_dim, 1)
    return ModelState(config, params)


def embed(state, numbers):
    """Look up one embedding row per atom by atomic number."""
    numbers = np.asarray(numbers)
    max_z = state.config.max_z
    if numbers.size and (numbers.min() < 1 or numbers.max() > max_z):
        bad = int(numbers[(numbers < 1) | (numbers > max_z)][0])
        raise ContractError(f"embed: atomic number {bad} outside table range 1..{max_z}")
    return ad.gather_rows(state["embedding"], numbers - 1)


def interaction(h, edges, e_rbf, lw):
    """Continuous-filter message passing: one residual update per atom.

    Each directed edge carries (W_v h)[src] gated elementwise by a filter
    generated from the edge's radial basis row; messages are summed onto
    their destination atom and passed through a two-layer update network
    with shifted-softplus nonlinearity.
    """
    n = h.data.shape[0]
    filt = ad.linear(ad.shifted_softplus(ad.linear(e_rbf, lw.filter1.weight, lw.filter1.bias)),
                     lw.filter2.weight, lw.filter2.bias)
    values = ad.linear(h, lw.value.weight, lw.value.bias)
    messages = ad.mul(ad.gather_rows(values, edges.src), filt)
    summed = ad.segment_sum(messages, edges.dst, n)
    hidden = ad.shifted_softplus(ad.linear(summed, lw.update1.weight, lw.update1.bias))
    return ad.linear(hidden, lw.update2.weight, lw.update2.bias)


def _mirror_passthrough(hierarchy, li, below, computed):
    """Overwrite pass-through clusters with a copy of their single member.

    Graphs that bottomed out below this level must see identity levels, so
    their coarse features always mirror the level underneath.
    """
    mask = hierarchy.passthrough[li]
    if not mask.any():
        return computed
    mirrored = ad.gather_rows(below, hierarchy.members[li])
    return ad.where_rows(mask, mirrored, computed)


def _check_forward_inputs(batch, hierarchy, state):
    cfg = state.config
    if cfg.variant == "baseline":
        return
    if hierarchy is None:
        raise ContractError("mcgm_forward: the mcgm variant requires a hierarchy")
    if hierarchy.levels[0].assign.size != batch.n_atoms:
        raise ContractError(
            f"mcgm_forward: hierarchy covers {hierarchy.levels[0].assign.size} atoms "
            f"but the batch has {batch.n_atoms}"
        )
    if hierarchy.n_levels > cfg.n_levels:
        raise ContractError(
            f"mcgm_forward: hierarchy has {hierarchy.n_levels} levels "
            f"but the model allocates {cfg.n_levels}"
        )


def mcgm_forward(batch, hierarchy, state, positions=None, edges=None):
    """Run the full backbone; returns (atom features, coarsest cluster features).

    ``positions`` may be a gradient-tracked Value so that energies built on
    the returned features differentiate back to atomic coordinates; when
    omitted, the batch's raw positions are used untracked. The ``baseline``
    variant skips every cluster exchange and returns None cluster features.
    """
    cfg = state.config
    _check_forward_inputs(batch, hierarchy, state)
    if positions is None:
        positions = ad.Value(batch.positions)
    if edges is None:
        edges = neighbor_list(batch, cfg.atom_cutoff)
    e_rbf_atom = rbf_expand(
        edge_distances(positions, edges), RbfSpec(cfg.atom_cutoff, cfg.n_rbf_atom)
    )

    h = embed(state, batch.numbers)
    if cfg.variant == "baseline":
        for l in range(cfg.n_layers):
            h = ad.add(h, interaction(h, edges, e_rbf_atom, state.layer(l)))
        return h, None

    # Star-topology caches: distances to centroids are fixed within one
    # forward pass, so each level's RBF rows are computed once and reused.
    spec_c = RbfSpec(cfg.cluster_cutoff, cfg.n_rbf_cluster)
    levels = hierarchy.levels
    stars = []
    pos_l = positions
    for lvl in levels:
        pos_l, e_rbf = star_rbf(pos_l, lvl, spec_c)
        stars.append(e_rbf)

    # Bottom-up initialization of every level's cluster features.
    clusters = []
    below = h
    for li, (lvl, e_rbf) in enumerate(zip(levels, stars)):
        computed = aggregate_pooled(below, e_rbf, lvl, state.affine(f"init_agg.{li + 1}"))
        below = _mirror_passthrough(hierarchy, li, below, computed)
        clusters.append(below)

    for l in range(cfg.n_layers):
        lw = state.layer(l)
        delta = interaction(h, edges, e_rbf_atom, lw)
        received = disseminate_from(clusters[0], stars[0], levels[0], state.affine(f"layers.{l}.dis"))
        h_next = ad.add(ad.add(h, delta), received)
        below = h  # pre-update atom features feed the level-1 refresh
        new_clusters = []
        for li, (lvl, e_rbf, c) in enumerate(zip(levels, stars, clusters)):
            pooled = aggregate_pooled(below, e_rbf, lvl, state.affine(f"layers.{l}.agg.{li + 1}"))
            c_next = _mirror_passthrough(hierarchy, li, below, ad.add(c, pooled))
            new_clusters.append(c_next)
            below = c_next  # higher levels aggregate the just-updated level
        h = h_next
        clusters = new_clusters

    # Top-down cascade: replace intermediate levels, residual at the atoms.
    # Nodes under a pass-through cluster copy the mirrored row instead, so
    # a shallow graph's chain is untouched by its batchmates' depth.
    h_top = clusters[-1]
    for li in range(len(levels) - 1, 0, -1):
        computed = disseminate_from(
            clusters[li], stars[li], levels[li], state.affine(f"final_dis.{li + 1}")
        )
        node_mask = hierarchy.passthrough[li][levels[li].assign]
        if node_mask.any():
            copied = ad.gather_rows(clusters[li], levels[li].assign)
            computed = ad.where_rows(node_mask, copied, computed)
        clusters[li - 1] = computed
    h = residual_fuse(
        h, disseminate_from(clusters[0], stars[0], levels[0], state.affine("final_dis.1"))
    )
    return h, h_top


# ------------------------------------------------------------- checkpoints


def state_tensors(state):
    """The parameter map as plain arrays, insertion-ordered."""
    return {name: p.data for name, p in state.params.items()}


def state_from_tensors(config, tensors):
    """Rebuild a ModelState, checking names and shapes against the config."""
    reference = init_model(config, seed=0)
    missing = [n for n in reference.params if n not in tensors]
    if missing:
        raise DataError(f"checkpoint is missing parameters: {missing[:3]}...")
    params = {}
    for name, ref in reference.params.items():
        arr = np.asarray(tensors[name], dtype=np.float64)
        if arr.shape != ref.data.shape:
            raise DataError(
                f"checkpoint parameter {name!r} has shape {arr.shape}, "
                f"expected {ref.data.shape}"
            )
        params[name] = Parameter(name, arr)
    return ModelState(config, params)


def save_checkpoint(path, config, tensors, meta=None):
    """Write a length-prefixed binary container.

    Layout: 4-byte magic, little-endian u64 header length, UTF-8 JSON
    header (format version, config, tensor names/shapes, metadata), then
    every tensor's raw float64 bytes in header order.
    """
    names = list(tensors)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": config.as_dict(),
        "tensors": [{"name": n, "shape": list(np.asarray(tensors[n]).shape)} for n in names],
        "meta": meta or {},
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(np.asarray(tensors[n], dtype=np.float64)).tobytes())


def load_checkpoint(path):
    """Read a checkpoint container; returns (config, tensors, meta)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    if len(raw) < off + 8:
        raise DataError(f"{path}: truncated checkpoint header")
    (hlen,) = struct.unpack_from("<Q", raw, off)
    off += 8
    if len(raw) < off + hlen:
        raise DataError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(raw[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: unreadable checkpoint header: {exc}") from exc
    off += hlen
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported format version {header.get('format_version')}")
    config = BackboneConfig.from_dict(header["config"])
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = off + 8 * count
        if end > len(raw):
            raise DataError(f"{path}: truncated tensor payload at {entry['name']!r}")
        tensors[entry["name"]] = np.frombuffer(raw[off:end], dtype="<f8").reshape(shape).copy()
        off = end
    if off != len(raw):
        raise DataError(f"{path}: {len(raw) - off} trailing bytes after tensor payload")
    return config, tensors, header.get("meta", {})
