"""Command-line entry point wiring the full pipeline.

Subcommands: ingest, synth, build-map, train, cv, ablate, eval, explain.
Every run writes a manifest.json (command, resolved config, seed, input
hashes, artifact paths, tool version) sufficient to reproduce it. Exit
codes: 0 ok, 1 usage, 2 validation, 3 runtime. ``CRKT_LOG`` sets verbosity.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import itertools
import json
import logging
import os
import sys

import numpy as np

from . import __version__, evaluation, training
from .concept_map import (
    build_from_edges,
    infer_statistical_map,
    write_edge_csv,
)
from .data import (
    DataValidationError,
    SynthConfig,
    dataset_stats,
    generate_synthetic,
    load_bundle,
    load_dataset,
    preprocess,
    read_edge_csv,
    subset_sequences,
    write_dataset,
)
from .evaluation import (
    build_variant,
    bucket_by_correct_rate,
    explain,
    explain_to_dot,
    metric_report,
    render_explain_png,
    VARIANT_KINDS,
)
from .model import CrktModel, ModelConfig, predict_sequences
from .training import (
    LossConfig,
    TrainConfig,
    compute_question_stats,
    run_cv,
    train,
    write_history_csv,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _hash_inputs(paths):
    out = {}
    for p in paths:
        if p is None:
            continue
        if os.path.isdir(p):
            for name in sorted(os.listdir(p)):
                full = os.path.join(p, name)
                if os.path.isfile(full):
                    out[full] = _sha256(full)
        elif os.path.isfile(p):
            out[p] = _sha256(p)
    return out


def _write_manifest(out_dir, command, args, inputs, artifacts, config=None, seed=None):
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "tool": "crkt",
        "version": __version__,
        "command": command,
        "argv": args,
        "seed": seed,
        "config": config,
        "input_hashes": _hash_inputs(inputs),
        "artifacts": sorted(artifacts),
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    return path


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------

_MODEL_KEYS = (
    "d_q", "d_c", "d_g", "n_heads", "gnn_layers", "top_k", "lam", "distance",
    "use_options", "use_map", "gnn_final_sigmoid",
)
_LOSS_KEYS = ("alpha", "beta", "flip_rate", "base_band")
_TRAIN_KEYS = (
    "lr", "max_epochs", "patience", "batch_size", "val_fraction", "freeze_augmentation",
)


def _load_config_file(path):
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    for section in cfg:
        if section not in ("model", "loss", "train"):
            raise DataValidationError(f"{path}: unknown config section {section!r}")
    for key in cfg.get("model", {}):
        if key not in _MODEL_KEYS:
            raise DataValidationError(f"{path}: unknown model key {key!r}")
    for key in cfg.get("loss", {}):
        if key not in _LOSS_KEYS:
            raise DataValidationError(f"{path}: unknown loss key {key!r}")
    for key in cfg.get("train", {}):
        if key not in _TRAIN_KEYS:
            raise DataValidationError(f"{path}: unknown train key {key!r}")
    return cfg


def _expand_grid(cfg):
    """Expand list-valued entries into the cross product of configurations."""
    axes = []
    for section, keys in cfg.items():
        for key, value in keys.items():
            if isinstance(value, list) and key != "base_band":
                axes.append((section, key, value))
    if not axes:
        return [cfg]
    combos = []
    for values in itertools.product(*(v for _, _, v in axes)):
        combo = {s: dict(v) for s, v in cfg.items()}
        for (section, key, _), value in zip(axes, values):
            combo[section][key] = value
        combos.append(combo)
    return combos


def _build_configs(bundle, cfg, seed):
    model_cfg = ModelConfig.from_bundle(bundle, **cfg.get("model", {}))
    loss_kw = dict(cfg.get("loss", {}))
    if "base_band" in loss_kw:
        loss_kw["base_band"] = tuple(loss_kw["base_band"])
    loss_cfg = LossConfig(k=model_cfg.top_k, **loss_kw)
    train_cfg = TrainConfig(seed=seed, **cfg.get("train", {}))
    return model_cfg, loss_cfg, train_cfg


def _load_map(bundle, map_path):
    if map_path is None:
        if bundle.map_edges is None:
            raise DataValidationError(
                "no concept map: pass --map or store concept_map.csv in the bundle"
            )
        return build_from_edges(bundle.concept_count, bundle.map_edges)
    return build_from_edges(bundle.concept_count, read_edge_csv(map_path))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _cmd_ingest(args, argv):
    bundle = load_dataset(args.interactions, args.questions)
    bundle = preprocess(bundle, max_len=args.max_len, min_len=args.min_len) if args.preprocess else bundle
    write_dataset(bundle, args.out)
    stats = dataset_stats(bundle)
    print(stats.to_json())
    _write_manifest(
        args.out, "ingest", argv, [args.interactions, args.questions],
        [os.path.join(args.out, f) for f in ("interactions.csv", "questions.jsonl", "meta.json")],
    )
    return EXIT_OK


def _cmd_synth(args, argv):
    with open(args.config, encoding="utf-8") as fh:
        cfg = SynthConfig(**json.load(fh))
    bundle, truth = generate_synthetic(cfg, args.seed)
    write_dataset(bundle, args.out)
    truth_path = os.path.join(args.out, "ground_truth.json")
    with open(truth_path, "w", encoding="utf-8") as fh:
        json.dump(
            {
                "abilities": truth.abilities.tolist(),
                "difficulties": truth.difficulties.tolist(),
                "dag_edges": [list(e) for e in truth.dag_edges],
            },
            fh,
        )
    print(dataset_stats(bundle).to_json())
    _write_manifest(args.out, "synth", argv, [args.config], [truth_path], seed=args.seed)
    return EXIT_OK


def _cmd_build_map(args, argv):
    bundle = load_bundle(args.bundle)
    artifacts = [args.out]
    if args.edges:
        cmap = build_from_edges(bundle.concept_count, read_edge_csv(args.edges))
        write_edge_csv(cmap, args.out)
    else:
        cmap, stats = infer_statistical_map(bundle)
        write_edge_csv(cmap, args.out)
        stats_path = args.out + ".stats.json"
        with open(stats_path, "w", encoding="utf-8") as fh:
            fh.write(stats.to_json())
        artifacts.append(stats_path)
        if stats.degenerate:
            print(stats.diagnostic, file=sys.stderr)
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    _write_manifest(out_dir, "build-map", argv, [args.bundle, args.edges], artifacts)
    return EXIT_OK


def _prepare_training(args):
    bundle = load_bundle(args.bundle)
    bundle = preprocess(bundle, max_len=args.max_len, min_len=args.min_len)
    cmap = _load_map(bundle, args.map)
    cfg = _load_config_file(args.config)
    return bundle, cmap, cfg


def _cmd_train(args, argv):
    bundle, cmap, cfg = _prepare_training(args)
    os.makedirs(args.out, exist_ok=True)
    combos = _expand_grid(cfg)
    results = []
    for idx, combo in enumerate(combos):
        model_cfg, loss_cfg, train_cfg = _build_configs(bundle, combo, args.seed)
        result = train(bundle, cmap, model_cfg, train_cfg, loss_cfg)
        best = min(h["val_loss"] for h in result.history)
        results.append((best, idx, combo, result))
        logger.info("config %d/%d best val_loss %.5f", idx + 1, len(combos), best)
    results.sort(key=lambda r: (r[0], r[1]))
    best_val, _, best_combo, best_result = results[0]
    ckpt = os.path.join(args.out, "model.crkt.zip")
    best_result.model.save(ckpt)
    hist = os.path.join(args.out, "history.csv")
    write_history_csv(best_result.history, hist)
    artifacts = [ckpt, hist]
    if len(combos) > 1:
        grid_path = os.path.join(args.out, "grid_results.csv")
        with open(grid_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["config_index", "config", "best_val_loss"])
            for best, idx, combo, _ in sorted(results, key=lambda r: r[1]):
                writer.writerow([idx, json.dumps(combo), best])
        artifacts.append(grid_path)
    print(json.dumps({"best_val_loss": best_val, "config": best_combo, "checkpoint": ckpt}))
    _write_manifest(
        args.out, "train", argv, [args.bundle, args.map, args.config], artifacts,
        config=best_combo, seed=args.seed,
    )
    return EXIT_OK


def _write_metric_table(path, rows, aggregate):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "dataset", "fold", "acc", "auc"])
        for row in rows:
            writer.writerow(row)
        for row in aggregate:
            writer.writerow(row)
    return path


def _cv_rows(cv, model_name, dataset):
    rows = []
    for r in cv.rows:
        if "error" in r:
            rows.append([model_name, dataset, r["fold"], "error", r["error"]])
        else:
            auc_s = f"{100 * r['auc']:.4f}" if r["auc"] is not None else "NA"
            rows.append([model_name, dataset, r["fold"], f"{100 * r['acc']:.4f}", auc_s])
    acc_label, auc_label = cv.aggregate_label()
    return rows, [model_name, dataset, "mean±std", acc_label, auc_label]


def _cmd_cv(args, argv):
    bundle, cmap, cfg = _prepare_training(args)
    os.makedirs(args.out, exist_ok=True)
    model_cfg, loss_cfg, train_cfg = _build_configs(bundle, cfg, args.seed)
    cv = run_cv(
        bundle, cmap, model_cfg, train_cfg, loss_cfg,
        k=args.folds, seed=args.seed, out_dir=args.out, jobs=args.jobs,
    )
    dataset = os.path.basename(os.path.normpath(args.bundle))
    rows, agg = _cv_rows(cv, "crkt", dataset)
    table = _write_metric_table(os.path.join(args.out, "metrics.csv"), rows, [agg])
    print(json.dumps({"mean_acc": cv.mean_acc, "mean_auc": cv.mean_auc, "table": table}))
    _write_manifest(
        args.out, "cv", argv, [args.bundle, args.map, args.config], [table],
        config=cfg, seed=args.seed,
    )
    return EXIT_OK


def _cmd_ablate(args, argv):
    bundle, cmap, cfg = _prepare_training(args)
    os.makedirs(args.out, exist_ok=True)
    model_cfg, loss_cfg, train_cfg = _build_configs(bundle, cfg, args.seed)
    dataset = os.path.basename(os.path.normpath(args.bundle))
    all_rows, aggregates = [], []
    for name in ("full",) + VARIANT_KINDS:
        variant_cfg = model_cfg if name == "full" else build_variant(name).apply(model_cfg)
        cv = run_cv(
            bundle, cmap, variant_cfg, train_cfg, loss_cfg,
            k=args.folds, seed=args.seed, jobs=args.jobs,
        )
        rows, agg = _cv_rows(cv, name, dataset)
        all_rows.extend(rows)
        aggregates.append(agg)
        logger.info("variant %s: mean auc %.4f", name, cv.mean_auc)
    table = _write_metric_table(os.path.join(args.out, "ablation.csv"), all_rows, aggregates)
    print(json.dumps({"table": table}))
    _write_manifest(
        args.out, "ablate", argv, [args.bundle, args.map, args.config], [table],
        config=cfg, seed=args.seed,
    )
    return EXIT_OK


def _cmd_eval(args, argv):
    model = CrktModel.load(args.checkpoint)
    bundle = load_bundle(args.bundle)
    bundle = preprocess(bundle, max_len=args.max_len, min_len=args.min_len)
    cmap = _load_map(bundle, args.map)
    os.makedirs(args.out, exist_ok=True)
    preds = predict_sequences(model, bundle.sequences, cmap)
    report = metric_report(preds["y_hat"], preds["y_true"])
    # bucket analysis rates come from the evaluated bundle itself
    stats = compute_question_stats(bundle.sequences)
    edges = np.linspace(0.0, 1.0, args.buckets + 1)
    bands = [(float(edges[i]), float(edges[i + 1])) for i in range(args.buckets)]
    buckets = bucket_by_correct_rate(
        preds["y_hat"], preds["y_true"], preds["question_id"], stats, bands
    )
    metrics_path = os.path.join(args.out, "metrics.json")
    with open(metrics_path, "w", encoding="utf-8") as fh:
        json.dump({"metrics": report.to_dict(), "buckets": buckets.to_dict()}, fh, indent=2)
    print(json.dumps(report.to_dict()))
    _write_manifest(
        args.out, "eval", argv, [args.checkpoint, args.bundle], [metrics_path],
    )
    return EXIT_OK


def _cmd_explain(args, argv):
    model = CrktModel.load(args.checkpoint)
    bundle = load_bundle(args.bundle)
    cmap = _load_map(bundle, args.map)
    sequences = subset_sequences(bundle, [args.student])
    if not sequences:
        raise DataValidationError(f"student {args.student!r} not found in bundle")
    seq = sequences[0]
    meta = bundle.questions.get(args.target)
    if meta is None:
        raise DataValidationError(f"target question {args.target} not in bundle")
    report = explain(
        model, seq, args.target, cmap, question_meta=meta, prefix_len=args.prefix_len
    )
    os.makedirs(args.out, exist_ok=True)
    json_path = os.path.join(args.out, "explain.json")
    with open(json_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    dot_path = os.path.join(args.out, "explain.dot")
    with open(dot_path, "w", encoding="utf-8") as fh:
        fh.write(explain_to_dot(report, cmap))
    artifacts = [json_path, dot_path]
    if args.plot:
        artifacts.append(render_explain_png(report, cmap, os.path.join(args.out, "explain.png")))
    print(report.to_json())
    _write_manifest(args.out, "explain", argv, [args.checkpoint, args.bundle], artifacts)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_preprocess_flags(p):
    p.add_argument("--max-len", type=int, default=200, help="split sequences longer than this")
    p.add_argument("--min-len", type=int, default=5, help="drop sequences shorter than this")


def build_parser():
    parser = _Parser(prog="crkt", description=__doc__)
    parser.add_argument("--version", action="version", version=f"crkt {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate and normalize a raw dataset")
    p.add_argument("--interactions", required=True)
    p.add_argument("--questions", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--preprocess", action="store_true", help="apply length filtering/windowing")
    _add_preprocess_flags(p)
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("synth", help="generate a synthetic dataset with known ground truth")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("build-map", help="author or infer a concept map")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--edges", help="authored edge CSV to validate and pass through")
    group.add_argument("--infer", action="store_true", help="infer edges from the logs")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_build_map)

    for name, fn in (("train", _cmd_train), ("cv", _cmd_cv), ("ablate", _cmd_ablate)):
        p = sub.add_parser(name)
        p.add_argument("--bundle", required=True)
        p.add_argument("--map", default=None)
        p.add_argument("--config", default=None)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True)
        p.add_argument("--jobs", type=int, default=1)
        if name != "train":
            p.add_argument("--folds", type=int, default=5)
        _add_preprocess_flags(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("eval", help="metrics and correct-rate buckets for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--map", default=None)
    p.add_argument("--buckets", type=int, default=10)
    p.add_argument("--out", required=True)
    _add_preprocess_flags(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("explain", help="IRT decomposition and concept-map view")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--map", default=None)
    p.add_argument("--student", required=True)
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--prefix-len", type=int, default=None)
    p.add_argument("--plot", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_explain)
    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    level = os.environ.get("CRKT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"crkt: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --version/--help paths
        return int(exc.code or 0)
    try:
        return args.func(args, argv)
    except _UsageError as exc:
        print(f"crkt: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataValidationError as exc:
        for problem in exc.problems:
            print(f"crkt: validation error: {problem}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"crkt: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
