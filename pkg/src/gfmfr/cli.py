"""Command-line entry point.

Subcommands:
  synth      generate a planted-group synthetic dataset on disk
  run        one federated experiment from a config file and/or flags
  ablate     preset grouping/schedule variant matrix with shared seeds
  ldp-sweep  one run per noise scale delta in {0,1,2,3,4,5}

Every experiment flag mirrors a config-file key; flags override file
values and the manifest records the merged result. Exit codes: 0 success,
2 usage, 3 config error, 4 data error, 5 numeric failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import fields, replace
from pathlib import Path

from . import __version__
from .config import ExperimentConfig, config_from_dict, load_config
from .dataio import (
    SyntheticSpec,
    generate_synthetic,
    leave_one_out_split,
    load_interactions,
    load_modality_features,
    write_modality_features,
)
from .engine import run_experiment, write_outputs
from .errors import ConfigError, DataError, NumericError

_FLAG_HELP = {
    "config_version": "config schema version (must be 1)",
    "rounds": "number of communication rounds",
    "groups": "number of client groups g",
    "local_epochs": "local training epochs per round",
    "sample_ratio": "fraction of clients sampled per round",
    "lambda_base": "base distillation coefficient",
    "schedule": "distillation coefficient schedule",
    "grouping": "client grouping strategy",
    "variant": "gfmfr or backbone-only federation",
    "ldp_delta": "Laplace noise scale for uploads (0 disables)",
    "n_neg": "negatives sampled per positive",
    "embed_dim": "user/item embedding width d",
    "hidden_dim": "predictor hidden width h",
    "modality_dim": "modality feature width (must match the feature file)",
    "group_embed_dim": "group embedding width",
    "client_lr": "client Adam learning rate",
    "fusion_lr": "fusion module Adam learning rate",
    "fusion_steps": "fusion training steps per round",
    "seed": "root seed for every stream",
    "eval_every": "evaluate every this many rounds",
    "top_k": "ranking cutoff for HR/NDCG",
    "smoothing": "smoothing factor for smooth/ours schedules",
    "warmup_frac": "warmup fraction for progressive/ours schedules",
    "kl_direction": "distillation KL direction",
    "distill_scope": "distill over the batch, batch+sample, or the full catalog",
    "distill_sample": "extra uniform items per distillation batch (sampled scope)",
    "exclude_train_items": "exclude train items from ranking candidates",
    "kmeans_restarts": "k-means++ restarts per clustering call",
    "threads": "worker threads for client training",
}


def _parse_bool(raw: str) -> bool:
    if raw.lower() in ("true", "1", "yes"):
        return True
    if raw.lower() in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {raw!r}")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    defaults = ExperimentConfig()
    for f in fields(ExperimentConfig):
        kind = type(getattr(defaults, f.name))
        parser.add_argument(
            "--" + f.name.replace("_", "-"),
            dest=f.name,
            type=_parse_bool if kind is bool else kind,
            default=None,
            help=f"{_FLAG_HELP[f.name]} (default {getattr(defaults, f.name)})",
        )


def _merge_config(args: argparse.Namespace) -> ExperimentConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = ExperimentConfig()
    overrides = {
        f.name: getattr(args, f.name)
        for f in fields(ExperimentConfig)
        if getattr(args, f.name, None) is not None
    }
    merged = dict(cfg.to_dict(), **overrides)
    return config_from_dict(merged)


def _add_io_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="config file (key = value)")
    parser.add_argument("--interactions", type=Path, required=True, help="interactions TSV")
    parser.add_argument("--features", type=Path, required=True, help="modality feature file")
    parser.add_argument("--out", type=Path, required=True, help="output directory")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(
    outdir: Path, cfg: ExperimentConfig, interactions: Path, features: Path
) -> None:
    manifest = {
        "code_version": __version__,
        "config": cfg.to_dict(),
        "inputs": {
            "interactions": {"path": str(interactions), "sha256": _sha256(interactions)},
            "features": {"path": str(features), "sha256": _sha256(features)},
        },
        "outdir": str(outdir),
    }
    with open(outdir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_dataset(args: argparse.Namespace):
    store = load_interactions(args.interactions)
    split = leave_one_out_split(store)
    features = load_modality_features(args.features, store.num_items)
    return split, features


def _single_run(cfg: ExperimentConfig, split, features, outdir: Path):
    result = run_experiment(cfg, split, features)
    write_outputs(result, outdir)
    return result.metrics[-1]


def cmd_synth(args: argparse.Namespace) -> int:
    outdir = Path(args.out)
    if outdir.exists() and any(outdir.iterdir()) and not args.force:
        raise DataError(f"{outdir} is not empty; pass --force to overwrite")
    outdir.mkdir(parents=True, exist_ok=True)
    try:
        spec = SyntheticSpec(
            num_users=args.users,
            num_items=args.items,
            modalities=args.modalities,
            feature_dim=args.dim,
            true_group_count=args.groups,
            interactions_per_user=args.interactions,
            noise_level=args.noise,
            seed=args.seed,
        )
        store, features, true_groups = generate_synthetic(spec)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    with open(outdir / "interactions.tsv", "w", encoding="utf-8") as fh:
        for u, recs in enumerate(store.user_items):
            for item, ts in recs:
                fh.write(f"{u}\t{item}\t{ts}\n")
    write_modality_features(outdir / "features.gmf", features)
    with open(outdir / "true_groups.csv", "w", encoding="utf-8") as fh:
        fh.write("user_id,group_id\n")
        for u, gid in enumerate(true_groups):
            fh.write(f"{u},{gid}\n")
    print(f"wrote {store.num_users} users, {store.num_items} items, "
          f"{features.k} modalities to {outdir}")
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _merge_config(args)
    split, features = _load_dataset(args)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    _write_manifest(outdir, cfg, args.interactions, args.features)
    final = _single_run(cfg, split, features, outdir)
    print(f"round {final.round}: HR@{cfg.top_k}={final.hr_at_k:.4f} "
          f"NDCG@{cfg.top_k}={final.ndcg_at_k:.4f}")
    print(f"outputs in {outdir}")
    return 0


_GROUPING_VARIANTS = [
    ("baseline", "kmeans"),
    ("random-group", "random"),
    ("single-group", "single"),
    ("multiple-agg", "kmeans+multiple-agg"),
]


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = _merge_config(args)
    split, features = _load_dataset(args)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    runs: list[tuple[str, str, ExperimentConfig]] = []
    if args.axis in ("grouping", "both"):
        for name, grouping in _GROUPING_VARIANTS:
            runs.append(("grouping", name, replace(cfg, grouping=grouping)))
    if args.axis in ("schedule", "both"):
        for schedule in ("scale-align", "smooth", "progressive", "ours"):
            runs.append(("schedule", schedule, replace(cfg, schedule=schedule)))

    rows = []
    for axis, name, variant_cfg in runs:
        subdir = outdir / f"{axis}_{name.replace('-', '_')}"
        subdir.mkdir(parents=True, exist_ok=True)
        _write_manifest(subdir, variant_cfg, args.interactions, args.features)
        final = _single_run(variant_cfg, split, features, subdir)
        rows.append((axis, name, final.round, final.hr_at_k, final.ndcg_at_k))
        print(f"{axis}/{name}: HR@{cfg.top_k}={final.hr_at_k:.4f}")
    with open(outdir / "comparison.csv", "w", encoding="utf-8") as fh:
        fh.write("axis,variant,round,hr_at_k,ndcg_at_k\n")
        for row in rows:
            fh.write(",".join(str(x) for x in row) + "\n")
    return 0


def cmd_ldp_sweep(args: argparse.Namespace) -> int:
    cfg = _merge_config(args)
    split, features = _load_dataset(args)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    rows = []
    for delta in (0, 1, 2, 3, 4, 5):
        variant_cfg = replace(cfg, ldp_delta=float(delta))
        subdir = outdir / f"delta_{delta}"
        subdir.mkdir(parents=True, exist_ok=True)
        _write_manifest(subdir, variant_cfg, args.interactions, args.features)
        final = _single_run(variant_cfg, split, features, subdir)
        rows.append((delta, final.round, final.hr_at_k, final.ndcg_at_k))
        print(f"delta={delta}: HR@{cfg.top_k}={final.hr_at_k:.4f}")
    with open(outdir / "sweep.csv", "w", encoding="utf-8") as fh:
        fh.write("ldp_delta,round,hr_at_k,ndcg_at_k\n")
        for row in rows:
            fh.write(",".join(str(x) for x in row) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gfmfr",
        description="Deterministic simulator for group-wise multimodal federated recommendation",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic planted-group dataset")
    p_synth.add_argument("--users", type=int, default=200)
    p_synth.add_argument("--items", type=int, default=500)
    p_synth.add_argument("--groups", type=int, default=4, help="planted group count")
    p_synth.add_argument("--modalities", type=int, default=2)
    p_synth.add_argument("--dim", type=int, default=16, help="modality feature width")
    p_synth.add_argument("--interactions", type=int, default=20, help="interactions per user")
    p_synth.add_argument("--noise", type=float, default=0.3)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--out", type=Path, required=True)
    p_synth.add_argument("--force", action="store_true", help="overwrite a non-empty directory")
    p_synth.set_defaults(func=cmd_synth)

    p_run = sub.add_parser("run", help="run one federated experiment")
    _add_io_flags(p_run)
    _add_config_flags(p_run)
    p_run.set_defaults(func=cmd_run)

    p_ablate = sub.add_parser("ablate", help="run the grouping/schedule ablation presets")
    p_ablate.add_argument("--axis", choices=("grouping", "schedule", "both"), default="both")
    _add_io_flags(p_ablate)
    _add_config_flags(p_ablate)
    p_ablate.set_defaults(func=cmd_ablate)

    p_sweep = sub.add_parser("ldp-sweep", help="run all noise scales delta in 0..5")
    _add_io_flags(p_sweep)
    _add_config_flags(p_sweep)
    p_sweep.set_defaults(func=cmd_ldp_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 3
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 4
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 5
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
