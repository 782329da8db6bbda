"""Command-line entry point: generate / train / evaluate / ablate / sweep.

Configuration precedence is CLI flag > config file > built-in default; the
config file is flat `key = value` text with `#` comments. The output
directory may additionally be set through the MHCR_OUTPUT_DIR environment
variable (CLI flag still wins). All randomness flows from one root seed,
printed at startup.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from . import evaluation
from .checkpoint import load_checkpoint, save_checkpoint
from .dataio import (
    MODALITIES,
    VAL,
    SyntheticConfig,
    format_dataset_stats,
    generate_synthetic,
    load_features,
    load_interactions,
    load_split,
    save_features,
    save_interactions,
    save_split,
    split_dataset,
    unseen_eval_items,
)
from .errors import ConfigError, DataError, MhcrError, NumericError
from .objectives import LossBreakdown
from .training import (
    TrainConfig,
    VARIANT_PRESETS,
    apply_variant,
    build_views,
    compute_embeddings,
    fit,
    variant_label,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

ENV_OUTPUT_DIR = "MHCR_OUTPUT_DIR"

_TRAIN_FIELDS = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
_FLAG_FIELDS = ("use_ui", "use_ii", "use_hem", "use_hc", "use_ghc")


def load_config_file(path: str | Path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    values: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        values[key] = value
    return values


def _coerce(key: str, value: str, kind: type) -> object:
    try:
        if kind is bool:
            lowered = value.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        return kind(value)
    except ValueError:
        raise ConfigError(f"config key {key}: cannot parse {value!r} as {kind.__name__}") from None


def _merge_train_config(args: argparse.Namespace) -> TrainConfig:
    cfg = TrainConfig()
    file_values = load_config_file(args.config) if args.config else {}
    updates: dict[str, object] = {}
    for key, value in file_values.items():
        if key in ("out_dir", "data_dir", "split_ratios", "variant", "modalities", "cold_threshold"):
            continue
        if key not in _TRAIN_FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        kind = {"d": int, "layers": int, "k_knn": int, "k_hyper": int, "hyper_steps": int,
                "batch_size": int, "max_epochs": int, "patience": int, "seed": int}.get(key)
        if kind is None:
            kind = bool if key in _FLAG_FIELDS else float
        updates[key] = _coerce(key, value, kind)
    cfg = replace(cfg, **updates)

    variant = getattr(args, "variant", None)
    if variant is None:
        variant = file_values.get("variant")
    if variant:
        cfg = apply_variant(cfg, variant)

    cli_updates = {
        name: getattr(args, name)
        for name in _TRAIN_FIELDS
        if getattr(args, name, None) is not None
    }
    return replace(cfg, **cli_updates)


def _resolve_out_dir(args: argparse.Namespace, file_values: dict[str, str] | None = None) -> Path:
    if args.out_dir:
        out = Path(args.out_dir)
    elif os.environ.get(ENV_OUTPUT_DIR):
        out = Path(os.environ[ENV_OUTPUT_DIR])
    elif file_values and "out_dir" in file_values:
        out = Path(file_values["out_dir"])
    else:
        out = Path("mhcr-out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_ratios(text: str) -> tuple[float, float, float]:
    parts = text.split(",")
    if len(parts) != 3:
        raise ConfigError(f"split ratios need three comma-separated values, got {text!r}")
    try:
        train, val, test = (float(p) for p in parts)
    except ValueError:
        raise ConfigError(f"cannot parse split ratios {text!r}") from None
    return train, val, test


def _resolve_ratios(args, file_values: dict[str, str]) -> tuple[float, float, float]:
    text = args.split_ratios or file_values.get("split_ratios")
    return _parse_ratios(text) if text else (0.7, 0.1, 0.2)


def _resolve_modalities(args, file_values: dict[str, str]) -> str | None:
    return args.modalities or file_values.get("modalities")


def _load_data(data_dir: str, modalities: str | None):
    root = Path(data_dir)
    interactions = root / "interactions.tsv"
    if not interactions.exists():
        raise DataError(f"interactions file not found: {interactions}")
    ds = load_interactions(interactions)
    if modalities:
        tags = [t.strip() for t in modalities.split(",") if t.strip()]
    else:
        tags = [t for t in MODALITIES if (root / f"features_{t}.bin").exists()]
        if not tags:
            raise DataError(f"no features_<modality>.bin files found in {root}")
    features = []
    for tag in tags:
        path = root / f"features_{tag}.bin"
        if not path.exists():
            raise DataError(f"missing feature file for modality {tag!r}: {path}")
        features.append(load_features(path))
    return ds, features


def _write_training_log(path: Path, variant: str, rows: Sequence[tuple[int, LossBreakdown]]) -> None:
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write(f"# variant: {variant}\n")
        writer = csv.writer(fh)
        writer.writerow(("epoch",) + LossBreakdown.CSV_FIELDS)
        for epoch, b in rows:
            writer.writerow([epoch, b.l_bpr, b.l_hc, b.l_ghc, b.l_reg, b.total])


def _combined_report(user_emb, item_emb, ds, cold_threshold: int) -> evaluation.EvalReport:
    report = evaluation.evaluate(user_emb, item_emb, ds, slice_name=evaluation.SLICE_ALL)
    cold = evaluation.evaluate(
        user_emb, item_emb, ds, slice_name=evaluation.SLICE_COLD, cold_threshold=cold_threshold
    )
    report.records.extend(cold.records)
    return report


def cmd_generate(args: argparse.Namespace) -> int:
    file_values = load_config_file(args.config) if args.config else {}
    cfg = SyntheticConfig()
    updates: dict[str, object] = {}
    for key in ("num_users", "num_items", "num_clusters", "seed"):
        value = getattr(args, key, None)
        if value is None and key in file_values:
            value = _coerce(key, file_values[key], int)
        if value is not None:
            updates[key] = value
    for key in ("mean_interactions", "degree_exponent", "within_cluster_prob", "noise_std"):
        value = getattr(args, key, None)
        if value is None and key in file_values:
            value = _coerce(key, file_values[key], float)
        if value is not None:
            updates[key] = value
    dims = dict(cfg.modality_dims)
    for tag in MODALITIES:
        value = getattr(args, f"{tag}_dim", None)
        if value is None and f"{tag}_dim" in file_values:
            value = _coerce(f"{tag}_dim", file_values[f"{tag}_dim"], int)
        if value is not None:
            if value == 0:
                dims.pop(tag, None)
            else:
                dims[tag] = value
    updates["modality_dims"] = dims
    cfg = replace(cfg, **updates)
    cfg.validate()
    print(f"root seed: {cfg.seed}")

    out_dir = _resolve_out_dir(args, file_values)
    ds, features = generate_synthetic(cfg)
    save_interactions(ds, out_dir / "interactions.tsv")
    for feats in features:
        save_features(feats, out_dir / f"features_{feats.modality}.bin")
    print(format_dataset_stats(ds.num_users, ds.num_items, len(ds)))
    print(f"wrote {out_dir}/interactions.tsv and {len(features)} feature file(s)")
    return EXIT_OK


def _run_training(args: argparse.Namespace) -> int:
    file_values = load_config_file(args.config) if args.config else {}
    cfg = _merge_train_config(args)
    cfg.validate()
    print(f"root seed: {cfg.seed}")
    out_dir = _resolve_out_dir(args, file_values)
    ratios = _resolve_ratios(args, file_values)

    ds_raw, features = _load_data(args.data_dir, _resolve_modalities(args, file_values))
    ds = split_dataset(ds_raw, ratios, seed=cfg.seed)
    save_split(ds, out_dir / "split.tsv")
    print(format_dataset_stats(ds.num_users, ds.num_items, len(ds)))
    print(f"unseen val/test items: {unseen_eval_items(ds)} interaction(s)")
    if ds.num_dropped_users:
        print(f"dropped users without train interactions: {ds.num_dropped_users}")

    result = fit(ds, features, cfg)
    print(f"variant: {result.variant}")
    print(
        f"best epoch {result.best_epoch} val Recall@20 {result.best_val_recall20:.5f} "
        f"(initial {result.initial_val_recall20:.5f})"
    )

    save_checkpoint(result.params, out_dir / "checkpoint.bin")
    _write_training_log(
        out_dir / "training_log.csv",
        result.variant,
        [(e.epoch, e.loss) for e in result.epochs],
    )

    views = build_views(ds, features, cfg)
    user_emb, item_emb = compute_embeddings(result.params, views, cfg)
    report = evaluation.evaluate(user_emb, item_emb, ds, target_split=VAL, ks=(10, 20))
    (out_dir / "eval_val.json").write_text(report.to_json(), encoding="utf-8")
    print(report.format_table())
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    return _run_training(args)


def cmd_ablate(args: argparse.Namespace) -> int:
    if not getattr(args, "variant", None):
        raise ConfigError("ablate requires --variant")
    return _run_training(args)


def cmd_evaluate(args: argparse.Namespace) -> int:
    file_values = load_config_file(args.config) if args.config else {}
    cfg = _merge_train_config(args)
    print(f"root seed: {cfg.seed}")
    out_dir = _resolve_out_dir(args, file_values)

    params = load_checkpoint(args.checkpoint)
    if args.d is not None and args.d != params.d:
        raise ConfigError(f"--d {args.d} conflicts with checkpoint d={params.d}")
    if args.k_hyper is not None and args.k_hyper != params.hyper.k_hyper:
        raise ConfigError(
            f"--k-hyper {args.k_hyper} conflicts with checkpoint k_hyper={params.hyper.k_hyper}"
        )
    cfg = replace(cfg, d=params.d, k_hyper=params.hyper.k_hyper)

    ds_raw, features = _load_data(args.data_dir, _resolve_modalities(args, file_values))
    if args.split:
        ds = load_split(ds_raw, args.split)
    else:
        ds = split_dataset(ds_raw, _resolve_ratios(args, file_values), seed=cfg.seed)
    if ds.num_users != params.num_users or ds.num_items != params.num_items:
        raise DataError(
            f"checkpoint was trained on {params.num_users} users / {params.num_items} items, "
            f"dataset has {ds.num_users} / {ds.num_items}"
        )
    expected_dims = {f.modality: f.dim for f in features}
    if expected_dims != params.modality_dims:
        raise DataError(
            f"checkpoint modality dims {params.modality_dims} do not match data {expected_dims}"
        )

    cold_threshold = args.cold_threshold
    if cold_threshold is None:
        cold_threshold = (
            _coerce("cold_threshold", file_values["cold_threshold"], int)
            if "cold_threshold" in file_values
            else 3
        )

    views = build_views(ds, features, cfg)
    user_emb, item_emb = compute_embeddings(params, views, cfg)
    report = _combined_report(user_emb, item_emb, ds, cold_threshold)
    (out_dir / "eval_test.json").write_text(report.to_json(), encoding="utf-8")
    print(report.format_table())
    return EXIT_OK


def _parse_grid(text: str, kind: type) -> list:
    try:
        return [kind(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse grid {text!r}") from None


def cmd_sweep(args: argparse.Namespace) -> int:
    file_values = load_config_file(args.config) if args.config else {}
    cfg = _merge_train_config(args)
    cfg.validate()
    print(f"root seed: {cfg.seed}")
    out_dir = _resolve_out_dir(args, file_values)

    hyper_grid = _parse_grid(args.hyper_num_grid, int)
    hc_grid = _parse_grid(args.lambda_hc_grid, float)
    ghc_grid = _parse_grid(args.lambda_ghc_grid, float)

    ds_raw, features = _load_data(args.data_dir, _resolve_modalities(args, file_values))
    ds = split_dataset(ds_raw, _resolve_ratios(args, file_values), seed=cfg.seed)

    rows = []
    for k_hyper in hyper_grid:
        for lambda_hc in hc_grid:
            for lambda_ghc in ghc_grid:
                cell = replace(cfg, k_hyper=k_hyper, lambda_hc=lambda_hc, lambda_ghc=lambda_ghc)
                result = fit(ds, features, cell)
                rows.append((k_hyper, lambda_hc, lambda_ghc, result.best_val_recall20))
                print(
                    f"hyper_num={k_hyper} lambda_hc={lambda_hc} lambda_ghc={lambda_ghc} "
                    f"val_recall20={result.best_val_recall20:.5f}"
                )

    best_idx = max(range(len(rows)), key=lambda i: rows[i][3]) if rows else -1
    with (out_dir / "sweep.csv").open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["hyper_num", "lambda_hc", "lambda_ghc", "val_recall20", "best"])
        for i, row in enumerate(rows):
            writer.writerow(list(row) + [1 if i == best_idx else 0])
    if rows:
        best = rows[best_idx]
        print(
            f"best cell: hyper_num={best[0]} lambda_hc={best[1]} lambda_ghc={best[2]} "
            f"val_recall20={best[3]:.5f}"
        )
    return EXIT_OK


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--out-dir", help=f"output directory (env {ENV_OUTPUT_DIR})")
    parser.add_argument("--d", type=int)
    parser.add_argument("--layers", type=int)
    parser.add_argument("--k-knn", type=int, dest="k_knn")
    parser.add_argument("--k-hyper", type=int, dest="k_hyper")
    parser.add_argument("--hyper-steps", type=int, dest="hyper_steps")
    parser.add_argument("--drop-rate", type=float, dest="drop_rate")
    parser.add_argument("--tau", type=float)
    parser.add_argument("--tau-hc", type=float, dest="tau_hc")
    parser.add_argument("--tau-ghc", type=float, dest="tau_ghc")
    parser.add_argument("--lambda-hc", type=float, dest="lambda_hc")
    parser.add_argument("--lambda-ghc", type=float, dest="lambda_ghc")
    parser.add_argument("--lambda-reg", type=float, dest="lambda_reg")
    parser.add_argument("--learning-rate", type=float, dest="learning_rate")
    parser.add_argument("--batch-size", type=int, dest="batch_size")
    parser.add_argument("--max-epochs", type=int, dest="max_epochs")
    parser.add_argument("--patience", type=int)
    parser.add_argument("--seed", type=int)
    for flag in _FLAG_FIELDS:
        parser.add_argument(
            f"--{flag.replace('_', '-')}", action=argparse.BooleanOptionalAction, default=None
        )
    parser.add_argument("--split-ratios", dest="split_ratios", help="train,val,test e.g. 0.7,0.1,0.2")
    parser.add_argument("--modalities", help="comma-separated tags; default: discover files")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mhcr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="write a synthetic dataset")
    p_gen.add_argument("--config")
    p_gen.add_argument("--out-dir")
    p_gen.add_argument("--num-users", type=int, dest="num_users")
    p_gen.add_argument("--num-items", type=int, dest="num_items")
    p_gen.add_argument("--num-clusters", type=int, dest="num_clusters")
    p_gen.add_argument("--mean-interactions", type=float, dest="mean_interactions")
    p_gen.add_argument("--degree-exponent", type=float, dest="degree_exponent")
    p_gen.add_argument("--within-cluster-prob", type=float, dest="within_cluster_prob")
    p_gen.add_argument("--noise-std", type=float, dest="noise_std")
    p_gen.add_argument("--seed", type=int)
    for tag in MODALITIES:
        p_gen.add_argument(f"--{tag}-dim", type=int, dest=f"{tag}_dim", help="0 disables the modality")
    p_gen.set_defaults(func=cmd_generate)

    p_train = sub.add_parser("train", help="train and checkpoint a model")
    p_train.add_argument("--data-dir", required=True, dest="data_dir")
    _add_train_flags(p_train)
    p_train.add_argument("--variant", choices=sorted(VARIANT_PRESETS))
    p_train.set_defaults(func=cmd_train)

    p_ablate = sub.add_parser("ablate", help="train a named ablation variant")
    p_ablate.add_argument("--data-dir", required=True, dest="data_dir")
    _add_train_flags(p_ablate)
    p_ablate.add_argument("--variant", required=True, choices=sorted(VARIANT_PRESETS))
    p_ablate.set_defaults(func=cmd_ablate)

    p_eval = sub.add_parser("evaluate", help="evaluate a checkpoint on the test split")
    p_eval.add_argument("--data-dir", required=True, dest="data_dir")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--split", help="sidecar split TSV; default: re-split from seed")
    p_eval.add_argument(
        "--cold-threshold", type=int, default=None, dest="cold_threshold",
        help="train-interaction count below which a user is cold (default 3)",
    )
    _add_train_flags(p_eval)
    p_eval.add_argument(
        "--variant", choices=sorted(VARIANT_PRESETS),
        help="apply the same ablation preset the checkpoint was trained with",
    )
    p_eval.set_defaults(func=cmd_evaluate)

    p_sweep = sub.add_parser("sweep", help="grid search over hypergraph hyperparameters")
    p_sweep.add_argument("--data-dir", required=True, dest="data_dir")
    _add_train_flags(p_sweep)
    p_sweep.add_argument("--hyper-num-grid", default="8,16,32,64", dest="hyper_num_grid")
    p_sweep.add_argument("--lambda-hc-grid", default="1e-6,1e-5,1e-4", dest="lambda_hc_grid")
    p_sweep.add_argument("--lambda-ghc-grid", default="0.001,0.01,0.1", dest="lambda_ghc_grid")
    p_sweep.set_defaults(func=cmd_sweep)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except MhcrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
