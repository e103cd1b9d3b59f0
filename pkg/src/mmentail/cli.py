"""Command-line front end: generate / analyze / train / evaluate / predict.

Every command writes into a run directory (``--out``): its outputs, the
fully-resolved config, and a ``run.json`` manifest with the seed and sha256
checksums of all file inputs, so a run can be reproduced exactly from the
directory contents alone.

Exit codes: 0 success, 1 runtime or data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys

import numpy as np

from . import analysis, multimodal, synthgen, text_entailment
from .checkpoint import CheckpointError
from .config import config_from_kv, config_to_kv, read_kv_file, write_kv_file
from .corpus import (DataFormatError, Dataset, ImageFeatureStore, Label3,
                     Label5, LABELS5, class_counts, load_dataset,
                     load_feature_store, map_5way_to_3way, save_dataset,
                     save_feature_store)
from .ensemble import (extract_features, fit_domain_encoder, tree_from_json,
                       tree_predict, tree_to_json, tree_train,
                       write_feature_csv)
from .text_entailment import (ExternalPredictor, MatchPyramidConfig,
                              MatchPyramidPredictor, mp_predict,
                              write_predictions_jsonl)
from .multimodal import MultimodalConfig, mm_predict
from .synthgen import GenConfig, PRESETS
from .text_prep import (load_embedding_table, partitioned_embedding_table,
                        save_embedding_table, tokenize)

RUN_SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# Run-directory plumbing
# ---------------------------------------------------------------------------

def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _write_manifest(out_dir: str, command: str, seed: int | None,
                    inputs: list[str], outputs: list[str]) -> None:
    doc = {
        "schema_version": RUN_SCHEMA_VERSION,
        "command": command,
        "seed": seed,
        "inputs": {path: _sha256(path) for path in inputs},
        "outputs": sorted(outputs),
    }
    with open(os.path.join(out_dir, "run.json"), "w", encoding="utf-8") as fh:
        fh.write(json.dumps(doc, sort_keys=True, indent=2))
        fh.write("\n")


def _resolve_config(cls, base, config_path: str | None, overrides: dict):
    """Layer a kv file, then explicit CLI overrides, onto a base config."""
    kv = read_kv_file(config_path) if config_path else {}
    config = config_from_kv(cls, kv, base)
    live = {k: v for k, v in overrides.items() if v is not None}
    if live:
        config = dataclasses.replace(config, **live)
    return config


def _prepare_out(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _print_metrics_line(metrics: dict) -> None:
    print(f"pairs {metrics['n_pairs']}  accuracy {metrics['accuracy']:.4f}"
          f"  weighted_f1 {metrics['weighted_f1']:.4f}")


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def _cmd_generate(args) -> int:
    out = _prepare_out(args.out)
    base = PRESETS[args.preset]()
    config = _resolve_config(
        GenConfig, base, args.config,
        {"seed": args.seed, "n_per_class": args.n_per_class,
         "split_name": args.split})
    if args.three_way:
        ds, store = synthgen.generate_3way_dataset(config)
    else:
        ds, store = synthgen.generate_dataset(config)

    data_path = os.path.join(out, f"{args.split}.jsonl")
    feat_path = os.path.join(out, f"{args.split}.features")
    save_dataset(ds, data_path)
    save_feature_store(store, feat_path)
    outputs = [f"{args.split}.jsonl", f"{args.split}.features"]

    if args.embed_dim:
        claim_pool, doc_pool = synthgen._token_pools(config)
        extra = [t for t in tokenize(config.refute_marker) if t not in set(doc_pool)]
        table = partitioned_embedding_table(
            [claim_pool, doc_pool + extra], args.embed_dim, args.embed_seed)
        save_embedding_table(table, os.path.join(out, "embeddings.txt"))
        outputs.append("embeddings.txt")

    write_kv_file(os.path.join(out, "config.resolved"), config_to_kv(config))
    outputs.append("config.resolved")
    _write_manifest(out, "generate", config.seed,
                    [args.config] if args.config else [], outputs)
    print(f"wrote {len(ds)} pairs, {len(store)} image features to {out}")
    return 0


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

_QUANTITIES = {
    "overlap": analysis.overlap_quantity,
    "claim_len": analysis.claim_len_quantity,
    "doc_len": analysis.doc_len_quantity,
    "claim_ocr_len": analysis.claim_ocr_len_quantity,
    "doc_ocr_len": analysis.doc_ocr_len_quantity,
}


def _cmd_analyze(args) -> int:
    out = _prepare_out(args.out)
    ds = load_dataset(args.data, feature_store_path=args.features)

    per_class: dict[str, dict] = {label.value: {} for label in LABELS5}
    quantities = dict(_QUANTITIES)
    if args.features:
        store = load_feature_store(args.features)
        quantities["image_cosine"] = analysis.image_cosine_quantity(store)
    for name, quantity in quantities.items():
        for label, stats in analysis.per_class_stats(ds, quantity).items():
            per_class[label.value][name] = dataclasses.asdict(stats)

    domains = analysis.domain_label_distribution(ds)
    report = {
        "schema_version": 1,
        "n_pairs": len(ds),
        "class_counts": {label.value: n for label, n in class_counts(ds).items()},
        "per_class": {k: v for k, v in per_class.items() if v},
        "domain_label": {
            side: {dom: {label.value: n for label, n in row.items()}
                   for dom, row in table.items()}
            for side, table in domains.items()},
    }
    stats_path = os.path.join(out, "stats.json")
    with open(stats_path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(report, sort_keys=True, indent=2))
        fh.write("\n")
    inputs = [args.data] + ([args.features] if args.features else [])
    _write_manifest(out, "analyze", None, inputs, ["stats.json"])
    print(f"analyzed {len(ds)} pairs; report at {stats_path}")
    return 0


# ---------------------------------------------------------------------------
# train-text / train-multimodal
# ---------------------------------------------------------------------------

def _cmd_train_text(args) -> int:
    out = _prepare_out(args.out)
    config = _resolve_config(MatchPyramidConfig, MatchPyramidConfig(),
                             args.config, {})
    train = load_dataset(args.train, split_name="train")
    val = load_dataset(args.val, split_name="val")
    table = load_embedding_table(args.embeddings)

    model, log = text_entailment.mp_train(train, val, config, args.seed, table)
    text_entailment.save_model(os.path.join(out, "model.ckpt"), model)
    log.write_csv(os.path.join(out, "training_log.csv"))

    golds = [map_5way_to_3way(pair.label) for pair in val]
    preds = [mp_predict(pair, model, table).label for pair in val]
    metrics = analysis.metrics_dict(golds, preds)
    analysis.write_metrics_json(os.path.join(out, "metrics.json"), metrics)

    write_kv_file(os.path.join(out, "config.resolved"), config_to_kv(config))
    inputs = [args.train, args.val, args.embeddings]
    if args.config:
        inputs.append(args.config)
    _write_manifest(out, "train-text", args.seed, inputs,
                    ["model.ckpt", "training_log.csv", "metrics.json",
                     "config.resolved"])
    _print_metrics_line(metrics)
    return 0


def _load_store_pair(primary: str, extra: str | None) -> ImageFeatureStore:
    store = load_feature_store(primary)
    if extra:
        other = load_feature_store(extra)
        for image_id in other.ids():
            if image_id not in store:
                store.add(image_id, other[image_id])
    return store


def _cmd_train_multimodal(args) -> int:
    out = _prepare_out(args.out)
    config = _resolve_config(MultimodalConfig, MultimodalConfig(),
                             args.config, {})
    store = _load_store_pair(args.features, args.val_features)
    train = load_dataset(args.train, split_name="train")
    val = load_dataset(args.val, split_name="val")
    table = load_embedding_table(args.embeddings)

    model, log = multimodal.mm_train(train, val, config, args.seed, table, store)
    multimodal.save_model(os.path.join(out, "model.ckpt"), model)
    log.write_csv(os.path.join(out, "training_log.csv"))

    golds = [pair.label for pair in val]
    preds = [mm_predict(pair, model, table, store)[0] for pair in val]
    metrics = analysis.metrics_dict(golds, preds)
    analysis.write_metrics_json(os.path.join(out, "metrics.json"), metrics)

    write_kv_file(os.path.join(out, "config.resolved"), config_to_kv(config))
    inputs = [args.train, args.val, args.embeddings, args.features]
    if args.val_features:
        inputs.append(args.val_features)
    if args.config:
        inputs.append(args.config)
    _write_manifest(out, "train-multimodal", args.seed, inputs,
                    ["model.ckpt", "training_log.csv", "metrics.json",
                     "config.resolved"])
    _print_metrics_line(metrics)
    return 0


# ---------------------------------------------------------------------------
# train-ensemble
# ---------------------------------------------------------------------------

def _make_text_predictor(args, parser_error):
    if (args.text_checkpoint is None) == (args.text_preds is None):
        parser_error("exactly one of --text-checkpoint/--text-preds is required")
    if args.text_checkpoint:
        if not args.embeddings:
            parser_error("--text-checkpoint requires --embeddings")
        model = text_entailment.load_model(args.text_checkpoint)
        table = load_embedding_table(args.embeddings)
        return MatchPyramidPredictor(model, table), [args.text_checkpoint,
                                                     args.embeddings]
    return ExternalPredictor.load(args.text_preds), [args.text_preds]


def _cmd_train_ensemble(args) -> int:
    out = _prepare_out(args.out)
    predictor, predictor_inputs = _make_text_predictor(args, _usage_error)
    store = load_feature_store(args.features)
    train = load_dataset(args.train, feature_store_path=args.features,
                         split_name="train")
    val = load_dataset(args.val, feature_store_path=args.features,
                       split_name="val")
    include_domains = not args.no_domains

    encoder = fit_domain_encoder(train)
    def records(ds: Dataset):
        return [(pair.id, extract_features(pair, predictor, store, encoder))
                for pair in ds]
    train_records = records(train)
    val_records = records(val)

    tree = tree_train([(rec, pair.label) for (_, rec), pair
                       in zip(train_records, train)],
                      max_depth=args.max_depth,
                      include_domains=include_domains)
    with open(os.path.join(out, "tree.json"), "w", encoding="utf-8") as fh:
        fh.write(tree_to_json(tree, encoder, include_domains))
        fh.write("\n")

    golds = [pair.label for pair in val]
    preds = [tree_predict(tree, rec)[0] for _, rec in val_records]
    metrics = analysis.metrics_dict(golds, preds)
    analysis.write_metrics_json(os.path.join(out, "metrics.json"), metrics)

    outputs = ["tree.json", "metrics.json", "config.resolved"]
    if args.dump_features:
        write_feature_csv(os.path.join(out, "train_features.csv"),
                          train_records, encoder)
        write_feature_csv(os.path.join(out, "val_features.csv"),
                          val_records, encoder)
        outputs += ["train_features.csv", "val_features.csv"]

    write_kv_file(os.path.join(out, "config.resolved"),
                  {"max_depth": str(args.max_depth),
                   "include_domains": "true" if include_domains else "false"})
    _write_manifest(out, "train-ensemble", None,
                    [args.train, args.val, args.features] + predictor_inputs,
                    outputs)
    _print_metrics_line(metrics)
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def _read_predictions(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
                pair_id, label = rec["pair_id"], rec["label"]
            except (json.JSONDecodeError, KeyError, TypeError):
                raise DataFormatError(f"{path} line {lineno}: expected "
                                      "{{pair_id, label, ...}}") from None
            if pair_id in out:
                raise DataFormatError(f"{path} line {lineno}: duplicate "
                                      f"pair_id {pair_id!r}")
            out[pair_id] = label
    return out


def _parse_label(text: str):
    for enum in (Label3, Label5):
        try:
            return enum(text)
        except ValueError:
            continue
    raise DataFormatError(f"unknown label {text!r}")


def _cmd_evaluate(args) -> int:
    out = _prepare_out(args.out)
    gold_ds = load_dataset(args.gold)
    pred_by_id = _read_predictions(args.preds)

    golds, preds = [], []
    for pair in gold_ds:
        if pair.label is None:
            raise DataFormatError(f"gold pair {pair.id!r} is unlabeled")
        if pair.id not in pred_by_id:
            raise DataFormatError(f"no prediction for gold pair {pair.id!r}")
        pred = _parse_label(pred_by_id.pop(pair.id))
        gold = pair.label
        if isinstance(pred, Label3):
            gold = map_5way_to_3way(gold)
        golds.append(gold)
        preds.append(pred)
    if pred_by_id:
        extra = sorted(pred_by_id)[0]
        raise DataFormatError(f"prediction for unknown pair {extra!r}")

    metrics = analysis.metrics_dict(golds, preds)
    analysis.write_metrics_json(os.path.join(out, "metrics.json"), metrics)
    _write_manifest(out, "evaluate", None, [args.preds, args.gold],
                    ["metrics.json"])
    _print_metrics_line(metrics)
    return 0


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------

def _cmd_predict(args) -> int:
    out = _prepare_out(args.out)
    inputs = [args.checkpoint, args.data]
    outputs = ["predictions.jsonl"]

    if args.kind in ("multimodal5", "ensemble5"):
        if not args.features:
            _usage_error(f"--kind {args.kind} requires --features")
        store = load_feature_store(args.features)
        ds = load_dataset(args.data, feature_store_path=args.features)
        inputs.append(args.features)
    else:
        ds = load_dataset(args.data)

    rows: list[tuple[str, str, np.ndarray]] = []
    if args.kind == "text3":
        if not args.embeddings:
            _usage_error("--kind text3 requires --embeddings")
        model = text_entailment.load_model(args.checkpoint)
        table = load_embedding_table(args.embeddings)
        inputs.append(args.embeddings)
        for pair in ds:
            pred = mp_predict(pair, model, table)
            rows.append((pair.id, pred.label.value, pred.probabilities))
    elif args.kind == "multimodal5":
        if not args.embeddings:
            _usage_error("--kind multimodal5 requires --embeddings")
        model = multimodal.load_model(args.checkpoint)
        table = load_embedding_table(args.embeddings)
        inputs.append(args.embeddings)
        for pair in ds:
            label, probs = mm_predict(pair, model, table, store)
            rows.append((pair.id, label.value, probs))
    else:
        with open(args.checkpoint, "r", encoding="utf-8") as fh:
            tree, encoder, _ = tree_from_json(fh.read())
        predictor, predictor_inputs = _make_text_predictor(args, _usage_error)
        inputs += predictor_inputs
        records = [(pair.id, extract_features(pair, predictor, store, encoder))
                   for pair in ds]
        for pair_id, rec in records:
            label, probs = tree_predict(tree, rec)
            rows.append((pair_id, label.value, probs))
        if args.dump_features:
            write_feature_csv(os.path.join(out, "features.csv"),
                              records, encoder)
            outputs.append("features.csv")

    write_predictions_jsonl(os.path.join(out, "predictions.jsonl"), rows)
    _write_manifest(out, "predict", None, inputs, outputs)
    print(f"wrote {len(rows)} predictions to {out}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

class _UsageError(Exception):
    pass


def _usage_error(message: str):
    raise _UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmentail",
        description="Multimodal entailment: data generation, training, "
                    "evaluation, prediction.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--preset", choices=sorted(PRESETS), default="table")
    p.add_argument("--config", help="kv file overriding preset fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-per-class", type=int)
    p.add_argument("--split", default="train", help="output file stem")
    p.add_argument("--three-way", action="store_true",
                   help="balance over collapsed 3-way classes")
    p.add_argument("--embed-dim", type=int, default=0,
                   help="also write a random embedding table of this width")
    p.add_argument("--embed-seed", type=int, default=0)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("analyze", help="per-class statistics report")
    p.add_argument("--data", required=True)
    p.add_argument("--features", help="image feature store")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("train-text", help="train the 3-way text matcher")
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--config", help="kv file overriding model defaults")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train_text)

    p = sub.add_parser("train-multimodal", help="train the 5-way fusion net")
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--features", required=True, help="image feature store")
    p.add_argument("--val-features", help="extra store merged for validation")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--config", help="kv file overriding model defaults")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train_multimodal)

    p = sub.add_parser("train-ensemble", help="fit the decision tree")
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--features", required=True, help="image feature store")
    p.add_argument("--text-checkpoint", help="3-way model checkpoint")
    p.add_argument("--embeddings", help="required with --text-checkpoint")
    p.add_argument("--text-preds", help="3-way predictions JSONL instead of "
                                        "a checkpoint")
    p.add_argument("--max-depth", type=int, default=8)
    p.add_argument("--no-domains", action="store_true",
                   help="drop domain one-hot features")
    p.add_argument("--dump-features", action="store_true",
                   help="write the extracted feature CSVs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train_ensemble)

    p = sub.add_parser("evaluate", help="score predictions against gold")
    p.add_argument("--preds", required=True, help="predictions JSONL")
    p.add_argument("--gold", required=True, help="gold dataset JSONL")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("predict", help="run a fitted model over a dataset")
    p.add_argument("--kind", required=True,
                   choices=("text3", "multimodal5", "ensemble5"))
    p.add_argument("--checkpoint", required=True,
                   help="model checkpoint, or tree JSON for ensemble5")
    p.add_argument("--data", required=True)
    p.add_argument("--embeddings")
    p.add_argument("--features", help="image feature store")
    p.add_argument("--text-checkpoint", help="ensemble5: 3-way checkpoint")
    p.add_argument("--text-preds", help="ensemble5: 3-way predictions JSONL")
    p.add_argument("--dump-features", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_predict)

    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc.filename or exc}", file=sys.stderr)
        return 1
    except KeyError as exc:
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return 1
    except (DataFormatError, CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
