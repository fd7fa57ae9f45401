"""Command-line entry points: ``mcgm <gen|train|eval|inspect>``.

* ``gen``     — write a synthetic labeled XYZ dataset plus train/val/test
  index manifests.
* ``train``   — run per-seed training from a JSON config (flags override
  file values), writing per-seed ``metrics.jsonl`` / ``best.ckpt`` /
  ``last.ckpt`` and printing a final MAE table with mean ± std.
* ``eval``    — MAE report for a checkpoint on a dataset (meV, meV/Å).
* ``inspect`` — per-level cluster assignment dump for a checkpoint on a
  dataset: data lines ``graph_id node_id level cluster_id`` (ids local to
  each graph; a level-ℓ node is a cluster of level ℓ−1, atoms at level 1)
  plus ``#``-prefixed per-graph level-size summaries.

Exit codes: 0 success, 1 usage/config, 2 IO or bad data, 3 numeric
failure.  Every command is deterministic given its inputs and seeds.

JSON config schema (all sections optional; unknown keys rejected)::

    {
      "data":     {"dataset": "...xyz", "train": "...idx",
                   "val": "...idx", "test": "...idx"},
      "out_dir":  "runs/exp",
      "backbone": {...BackboneConfig fields...},
      "cluster":  {...ClusterConfig fields...},
      "train":    {...TrainConfig fields except cluster...}
    }
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .clustering import STRATEGIES, ClusterConfig
from .data import (
    DatasetSplit,
    make_batch,
    make_synthetic,
    parse_xyz,
    read_manifest,
    split as split_dataset,
    write_manifest,
    write_xyz,
)
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    GenerationError,
    NumericError,
    ParseError,
)
from .model import VARIANTS, BackboneConfig, init_model, load_checkpoint, state_from_tensors
from .training import (
    TrainConfig,
    evaluate,
    evaluation_hierarchy,
    format_mean_std,
    train,
)

_DATA_KEYS = ("dataset", "train", "val", "test")


# ------------------------------------------------------------ run config


def _load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file {path!r} is not valid JSON: {err}") from err


def _build_run_config(args):
    """Merge config file and flag overrides into validated config objects.

    Returns (data paths dict, out_dir, BackboneConfig, TrainConfig).
    Flags always win over file values; validation happens before any
    compute, and unknown keys anywhere are rejected.
    """
    raw = {}
    if args.config is not None:
        raw = _load_json(args.config)
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(raw) - {"data", "out_dir", "backbone", "cluster", "train"}
        if unknown:
            raise ConfigError(f"config: unknown top-level keys {sorted(unknown)}")

    data = dict(raw.get("data", {}))
    unknown = set(data) - set(_DATA_KEYS)
    if unknown:
        raise ConfigError(f"config data section: unknown keys {sorted(unknown)}")
    if args.data is not None:
        data["dataset"] = args.data
        for k in ("train", "val", "test"):
            data.setdefault(k, os.path.join(os.path.dirname(args.data), f"{k}.idx"))
    if "dataset" in data:
        base = os.path.dirname(data["dataset"])
        for k in ("train", "val", "test"):
            data.setdefault(k, os.path.join(base, f"{k}.idx"))
    missing = [k for k in _DATA_KEYS if k not in data]
    if missing:
        raise ConfigError(f"config: missing data paths {missing} (set 'data' or pass --data)")

    out_dir = args.out if args.out is not None else raw.get("out_dir")
    if out_dir is None:
        raise ConfigError("config: no output directory (set 'out_dir' or pass --out)")

    backbone_d = dict(raw.get("backbone", {}))
    if args.variant is not None:
        backbone_d["variant"] = args.variant
    try:
        backbone = BackboneConfig.from_dict(backbone_d)
    except ContractError as err:
        raise ConfigError(str(err)) from err

    cluster_d = dict(raw.get("cluster", {}))
    if args.clustering is not None:
        cluster_d["strategy"] = args.clustering
    train_d = dict(raw.get("train", {}))
    if "cluster" in train_d:
        raise ConfigError("config: clustering settings belong in the 'cluster' section")
    for flag, key in (
        ("lr", "lr"),
        ("batch_size", "batch_size"),
        ("max_epochs", "max_epochs"),
        ("loss", "loss"),
        ("scheduler", "scheduler"),
    ):
        v = getattr(args, flag)
        if v is not None:
            train_d[key] = v
    if args.seeds is not None:
        train_d["seeds"] = _parse_int_list(args.seeds, "--seeds")
    try:
        train_d["cluster"] = ClusterConfig.from_dict(cluster_d)
        train_cfg = TrainConfig.from_dict(train_d)
    except ContractError as err:
        raise ConfigError(str(err)) from err
    return data, out_dir, backbone, train_cfg


def _parse_int_list(text, flag):
    try:
        return tuple(int(tok) for tok in str(text).split(",") if tok != "")
    except ValueError:
        raise ConfigError(f"{flag} expects comma-separated integers, got {text!r}") from None


def _parse_float_list(text, flag):
    try:
        return tuple(float(tok) for tok in str(text).split(",") if tok != "")
    except ValueError:
        raise ConfigError(f"{flag} expects comma-separated numbers, got {text!r}") from None


def _read_dataset(path):
    with open(path) as fh:
        return parse_xyz(fh.read())


def _read_split(data_paths, n_molecules):
    parts = {}
    for k in ("train", "val", "test"):
        parts[k] = read_manifest(data_paths[k]) if os.path.exists(data_paths[k]) else []
    ds = DatasetSplit(train=parts["train"], val=parts["val"], test=parts["test"])
    for name, idx in parts.items():
        bad = [i for i in idx if i < 0 or i >= n_molecules]
        if bad:
            raise DataError(f"{name} manifest indexes missing molecules: {bad[:3]}")
    return ds


# ------------------------------------------------------------------- gen


def _cmd_gen(args):
    if args.n < 1:
        raise ConfigError(f"--n must be >= 1, got {args.n}")
    if args.min_atoms < 2 or args.max_atoms < args.min_atoms:
        raise ConfigError("--min-atoms/--max-atoms must satisfy 2 <= min <= max")
    fractions = _parse_float_list(args.fractions, "--fractions")
    os.makedirs(args.out, exist_ok=True)
    molecules = make_synthetic(args.n, n_atoms_range=(args.min_atoms, args.max_atoms),
                               seed=args.seed)
    ds = split_dataset(molecules, fractions=fractions, seed=args.seed)
    dataset_path = os.path.join(args.out, "dataset.xyz")
    with open(dataset_path, "w") as fh:
        fh.write(write_xyz(molecules))
    for name, idx in (("train", ds.train), ("val", ds.val), ("test", ds.test)):
        write_manifest(os.path.join(args.out, f"{name}.idx"), idx)
    print(f"wrote {args.n} molecules to {dataset_path}")
    print(f"splits: train={len(ds.train)} val={len(ds.val)} test={len(ds.test)}")
    return 0


# ----------------------------------------------------------------- train


def _cmd_train(args):
    data_paths, out_dir, backbone, cfg = _build_run_config(args)
    molecules = _read_dataset(data_paths["dataset"])
    ds = _read_split(data_paths, len(molecules))
    os.makedirs(out_dir, exist_ok=True)

    rows = []
    for seed in cfg.seeds:
        seed_dir = os.path.join(out_dir, f"seed{seed}")
        state = init_model(backbone, seed=seed)
        resume = bool(args.resume) and os.path.exists(os.path.join(seed_dir, "last.ckpt"))
        result = train(state, molecules, ds, cfg, seed=seed, out_dir=seed_dir, resume=resume)
        row = {"seed": seed, "val_mae_e": result.best_val,
               "test_mae_e": None, "test_mae_f": None}
        if ds.test:
            report = evaluate(result.best_path, [molecules[i] for i in ds.test])
            row["test_mae_e"] = report["mae_e"]
            row["test_mae_f"] = report["mae_f"]
        rows.append(row)
        print(f"seed {seed}: best epoch {result.best_epoch}, "
              f"val MAE {result.best_val:.6g} meV"
              + (f", test MAE {row['test_mae_e']:.6g} meV" if ds.test else ""))

    def column(key):
        return [r[key] for r in rows if r[key] is not None]

    print()
    print("seed  val_mae_e_meV  test_mae_e_meV  test_mae_f_meV_per_A")
    for r in rows:
        cells = [f"{r['seed']:<5d}", f"{r['val_mae_e']:<14.6g}"]
        cells.append(f"{r['test_mae_e']:<15.6g}" if r["test_mae_e"] is not None else f"{'-':<15}")
        cells.append(f"{r['test_mae_f']:.6g}" if r["test_mae_f"] is not None else "-")
        print(" ".join(cells))
    summary = [f"mean  {format_mean_std(column('val_mae_e'))}"]
    if column("test_mae_e"):
        summary.append(format_mean_std(column("test_mae_e")))
    if column("test_mae_f"):
        summary.append(format_mean_std(column("test_mae_f")))
    print("  ".join(summary))
    return 0


# ------------------------------------------------------------------ eval


def _require_file(path, what):
    if not os.path.exists(path):
        raise DataError(f"{what} not found: {path}")
    return path


def _select_molecules(args, molecules):
    if args.indices is None:
        return molecules, list(range(len(molecules)))
    idx = read_manifest(_require_file(args.indices, "index manifest"))
    bad = [i for i in idx if i < 0 or i >= len(molecules)]
    if bad:
        raise DataError(f"manifest indexes missing molecules: {bad[:3]}")
    return [molecules[i] for i in idx], idx


def _cmd_eval(args):
    ckpt = _require_file(args.checkpoint, "checkpoint")
    molecules = _read_dataset(_require_file(args.data, "dataset"))
    subset, _ = _select_molecules(args, molecules)
    mode = "energy" if args.energy_only else None
    report = evaluate(ckpt, subset, mode=mode)
    print(f"n_molecules: {report['n_molecules']}")
    print(f"mae_e_meV: {report['mae_e']:.10g}")
    if report["mae_f"] is not None:
        print(f"mae_f_meV_per_A: {report['mae_f']:.10g}")
    return 0


# --------------------------------------------------------------- inspect


def _local_ids(graph_of, n_graphs):
    """Per-graph local index of each globally indexed node/cluster."""
    offsets = np.zeros(n_graphs + 1, dtype=np.int64)
    np.add.at(offsets, graph_of + 1, 1)
    offsets = np.cumsum(offsets)
    return np.arange(graph_of.size, dtype=np.int64) - offsets[graph_of]


def _cmd_inspect(args):
    ckpt = _require_file(args.checkpoint, "checkpoint")
    config, tensors, meta = load_checkpoint(ckpt)
    if config.variant != "mcgm":
        raise ConfigError("inspect: checkpoint holds the plain backbone; no hierarchy to show")
    state = state_from_tensors(config, tensors)
    cluster_cfg = ClusterConfig()
    if isinstance(meta, dict) and "train_config" in meta:
        cluster_cfg = TrainConfig.from_dict(meta["train_config"]).cluster
    if args.clustering is not None:
        cluster_cfg = ClusterConfig.from_dict(
            dict(cluster_cfg.as_dict(), strategy=args.clustering)
        )
    molecules = _read_dataset(_require_file(args.data, "dataset"))
    subset, ids = _select_molecules(args, molecules)
    batch = make_batch(subset)
    hier = evaluation_hierarchy(state, batch, cluster_cfg, graph_keys=np.asarray(ids))

    lines = []
    for g, gid in enumerate(ids):
        sizes = []
        for lvl in hier.levels:
            sizes.append(int(np.sum(lvl.graph_of_cluster == g)))
        arrow = " -> ".join(str(s) for s in sizes)
        lines.append(f"# graph {gid}: {batch.atoms_per_graph[g]} atoms, level sizes {arrow}")
    node_graph = batch.graph_index
    node_local = _local_ids(node_graph, batch.n_graphs)
    for level_no, lvl in enumerate(hier.levels, start=1):
        cluster_local = _local_ids(lvl.graph_of_cluster, batch.n_graphs)
        for node in range(lvl.assign.size):
            c = lvl.assign[node]
            g = node_graph[node]
            lines.append(f"{ids[g]} {node_local[node]} {level_no} {cluster_local[c]}")
        node_graph = lvl.graph_of_cluster
        node_local = cluster_local
    text = "\n".join(lines) + "\n"
    if args.out_file is not None:
        with open(args.out_file, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


# ------------------------------------------------------------------ main


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _build_parser():
    parser = _Parser(prog="mcgm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = sub.add_parser("gen", help="write a synthetic XYZ dataset plus split manifests")
    gen.add_argument("--n", type=int, required=True, help="number of molecules")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--min-atoms", type=int, default=8, dest="min_atoms")
    gen.add_argument("--max-atoms", type=int, default=12, dest="max_atoms")
    gen.add_argument("--fractions", default="0.8,0.1,0.1",
                     help="train,val,test fractions (sum 1)")
    gen.set_defaults(func=_cmd_gen)

    tr = sub.add_parser("train", help="train one model per seed and report MAE")
    tr.add_argument("--config", help="JSON run config; flags override file values")
    tr.add_argument("--data", help="dataset XYZ (manifests default to its directory)")
    tr.add_argument("--out", help="output directory (per-seed subdirectories)")
    tr.add_argument("--variant", choices=VARIANTS)
    tr.add_argument("--clustering", choices=STRATEGIES)
    tr.add_argument("--seeds", help="comma-separated run seeds, e.g. 0,1,2")
    tr.add_argument("--lr", type=float)
    tr.add_argument("--batch-size", type=int, dest="batch_size")
    tr.add_argument("--max-epochs", type=int, dest="max_epochs")
    tr.add_argument("--loss", choices=("energy_l1", "energy_force_mse"))
    tr.add_argument("--scheduler", choices=("cosine_warmup", "plateau"))
    tr.add_argument("--resume", action="store_true",
                    help="continue any seed with an existing last.ckpt")
    tr.set_defaults(func=_cmd_train)

    ev = sub.add_parser("eval", help="MAE report for a checkpoint on a dataset")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True, help="dataset XYZ with targets")
    ev.add_argument("--indices", help="optional index manifest selecting a subset")
    ev.add_argument("--energy-only", action="store_true", dest="energy_only")
    ev.set_defaults(func=_cmd_eval)

    ins = sub.add_parser("inspect", help="dump per-level cluster assignments")
    ins.add_argument("--checkpoint", required=True)
    ins.add_argument("--data", required=True, help="dataset XYZ")
    ins.add_argument("--indices", help="optional index manifest selecting a subset")
    ins.add_argument("--clustering", choices=STRATEGIES,
                     help="override the checkpoint's clustering strategy")
    ins.add_argument("--out-file", dest="out_file", help="write the dump here instead of stdout")
    ins.set_defaults(func=_cmd_inspect)
    return parser


def main(argv=None):
    """Run one command; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:  # argparse --help
        code = exc.code
        return int(code) if code is not None else 0
    except (ConfigError, ContractError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (ParseError, DataError, GenerationError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except NumericError as err:
        print(f"error: {err}", file=sys.stderr)
        return 3


def console_main():
    sys.exit(main())


if __name__ == "__main__":
    console_main()
