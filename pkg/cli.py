#!/usr/bin/env python3
"""
vulnrnn pipeline CLI

Stages write their artifacts into the workspace directory:

  normalize  IR files            -> tokens.jsonl
  select     tokens.jsonl        -> manifest.jsonl, split.txt, selection_log.txt, cwe_table.txt
  embed      manifest.jsonl      -> vocab.txt, embedding.txt
  encode     manifest + vectors  -> encoded.npy, encoded.jsonl
  train      encoded dataset     -> weights.bin, history.jsonl
  evaluate   validation split    -> report.txt, report.jsonl, confusion.csv
  predict    raw IR files        -> predictions.jsonl

Exit codes: 0 success, 1 user error, 2 data error.
"""

import argparse
import sys
from multiprocessing import Pool
from pathlib import Path

import numpy as np
from tqdm import tqdm

from artifacts import read_records, records_digest, require_stamp, write_records, write_stamp
from config import cbow_params, derive_seed, load_config, stage_config_hash
from corpus import (CorpusManifest, DatasetSplit, SampleRecord, assign_labels, compute_class_weights,
                    corpus_statistics, cwe_table, format_cwe_table, format_selection_log,
                    generate_fixture_modules, load_label_map, select_samples, split_dataset)
from embedding import (EmbeddingMatrix, EncodedDataset, Vocabulary, build_vocabulary, encode_dataset,
                       encode_sample, train_cbow)
from errors import (ConfigError, ConfigHashMismatchError, DataError, EmptyCorpusError, IrParseError,
                    MissingArtifactError, VulnRnnError)
from evaluation import (baseline_accuracy, confusion, format_report, report, save_confusion_grid,
                        save_report)
from ir_normalizer import TokenStream, load_metadata_overrides, normalize_file
from log_utils import is_quiet, log_metric, log_with_timestamp, set_quiet
from neural import RnnClassifier, load_weights, save_weights
from training import fit, predict

TOKENS_FILE = "tokens.jsonl"
NORMALIZE_ERRORS_FILE = "normalize_errors.txt"
MANIFEST_FILE = "manifest.jsonl"
SELECTION_LOG_FILE = "selection_log.txt"
CWE_TABLE_FILE = "cwe_table.txt"
SPLIT_FILE = "split.txt"
VOCAB_FILE = "vocab.txt"
EMBEDDING_FILE = "embedding.txt"
ENCODED_INDEX_FILE = "encoded.npy"
ENCODED_FILE = "encoded.jsonl"
WEIGHTS_FILE = "weights.bin"
HISTORY_FILE = "history.jsonl"
REPORT_TEXT_FILE = "report.txt"
REPORT_FILE = "report.jsonl"
CONFUSION_FILE = "confusion.csv"
PREDICTIONS_FILE = "predictions.jsonl"


def _workspace(config):
    path = Path(config.workspace)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _stage_hash(config, ws, stage):
    """Config hash of `stage`, chained to the corpus the last normalize run produced"""
    stamp = require_stamp(ws, "normalize")
    return stage_config_hash(config, stage, stamp.get("corpus_digest", ""))


def _normalize_one(job):
    path, overrides = job
    try:
        return path, [s.to_record() for s in normalize_file(path, overrides)], None
    except (IrParseError, OSError, UnicodeError) as exc:
        return path, [], str(exc)


def cmd_normalize(config, input_dir=None):
    """Parse every .ll file under the input directory into token records"""
    input_dir = Path(input_dir or config.input_dir)
    if not input_dir.is_dir():
        raise ConfigError(f"Input directory {input_dir} does not exist or is not a directory")
    ws = _workspace(config)
    paths = sorted(input_dir.rglob("*.ll"))
    overrides = load_metadata_overrides(config.metadata_overrides)
    log_with_timestamp(f"🚀 Normalizing {len(paths)} IR file(s) from {input_dir} "
                       f"with {config.workers} worker(s)")

    jobs = [(str(p), overrides) for p in paths]
    progress = dict(total=len(jobs), desc="normalize", disable=is_quiet() or None)
    if config.workers > 1 and len(jobs) > 1:
        with Pool(config.workers) as pool:
            results = list(tqdm(pool.imap(_normalize_one, jobs), **progress))
    else:
        results = [_normalize_one(job) for job in tqdm(jobs, **progress)]

    records, failures = [], []
    for path, file_records, error in results:
        if error:
            log_with_timestamp(f"❌ {path}: {error}")
            failures.append(f"{path}\t{error}")
            continue
        relative = Path(path).relative_to(input_dir).as_posix()
        for record in file_records:
            record["source_path"] = relative
            records.append(record)

    with open(ws / NORMALIZE_ERRORS_FILE, "w", encoding="utf-8", newline="\n") as out:
        out.writelines(line + "\n" for line in failures)
    log_metric("normalize", files=len(paths), failed=len(failures), records=len(records))
    if not records:
        raise EmptyCorpusError(f"No function definitions extracted from {input_dir}")

    digest = records_digest(records)
    stage_hash = stage_config_hash(config, "normalize", digest)
    write_records(ws / TOKENS_FILE, "tokens", records, stage_hash,
                  meta={"files": len(paths), "failed": len(failures)})
    write_stamp(ws, "normalize", stage_hash, [TOKENS_FILE, NORMALIZE_ERRORS_FILE],
                extra={"corpus_digest": digest})
    log_with_timestamp(f"✅ {len(records)} function(s) from {len(paths) - len(failures)} file(s); "
                       f"{len(failures)} file(s) failed")
    return records


def _load_manifest(config, ws):
    stage_hash = _stage_hash(config, ws, "select")
    require_stamp(ws, "select", stage_hash)
    header, records = read_records(ws / MANIFEST_FILE, "manifest", stage_hash, stage="select")
    return CorpusManifest.from_records(records, header.get("meta"))


def cmd_select(config):
    """Select test cases, assign labels and split train/test/validation"""
    ws = _workspace(config)
    norm_hash = _stage_hash(config, ws, "normalize")
    require_stamp(ws, "normalize", norm_hash)
    _, records = read_records(ws / TOKENS_FILE, "tokens", norm_hash, stage="normalize")
    samples = [SampleRecord.from_stream(TokenStream.from_record(r)) for r in records]

    sel = config.selection
    manifest = select_samples(samples, sel.min_class_count, sel.min_tokens, sel.excluded_cwes,
                              sel.name_patterns(), sel.absent_cwes)
    label_map = load_label_map(config.label_map_path) if config.label_map_path else None
    manifest = assign_labels(manifest, config.mode, label_map)
    split = split_dataset(len(manifest.samples), manifest.labels, sel.split_ratios,
                          derive_seed(config.seed, "split"))
    stats = corpus_statistics(manifest.samples)

    stage_hash = _stage_hash(config, ws, "select")
    meta = manifest.header_meta()
    meta["statistics"] = stats
    write_records(ws / MANIFEST_FILE, "manifest", (s.to_record() for s in manifest.samples),
                  stage_hash, meta)
    split.save(ws / SPLIT_FILE)
    (ws / SELECTION_LOG_FILE).write_text(format_selection_log(manifest.selection_log), encoding="utf-8")
    (ws / CWE_TABLE_FILE).write_text(format_cwe_table(cwe_table(manifest)), encoding="utf-8")
    write_stamp(ws, "select", stage_hash, [MANIFEST_FILE, SPLIT_FILE, SELECTION_LOG_FILE, CWE_TABLE_FILE])

    log_metric("select", classes=manifest.num_classes, mode=manifest.mode, **stats)
    log_with_timestamp(f"✅ {stats['samples']} samples, {manifest.num_classes} classes ({manifest.mode}); "
                       f"split train/test/validation = {len(split.train)}/{len(split.test)}/"
                       f"{len(split.validation)}")
    log_with_timestamp(f"📊 stats: {stats['total_tokens']} tokens, {stats['unique_tokens']} unique tokens, "
                       f"{stats['samples']} samples")
    return manifest, split


def cmd_embed(config):
    """Build the vocabulary and train CBOW token vectors on the selected corpus"""
    ws = _workspace(config)
    manifest = _load_manifest(config, ws)
    corpus = [s.tokens for s in manifest.samples]
    vocab = build_vocabulary(corpus)
    emb = train_cbow(corpus, vocab, cbow_params(config, derive_seed(config.seed, "embed")))
    vocab.save(ws / VOCAB_FILE)
    emb.save(ws / EMBEDDING_FILE, vocab)
    write_stamp(ws, "embed", _stage_hash(config, ws, "embed"), [VOCAB_FILE, EMBEDDING_FILE])
    log_with_timestamp(f"✅ Vocabulary of {len(vocab)} tokens, {emb.dimension}-dimensional vectors")
    return vocab, emb


def _load_vectors(config, ws):
    require_stamp(ws, "embed", _stage_hash(config, ws, "embed"))
    vocab = Vocabulary.load(ws / VOCAB_FILE)
    return vocab, EmbeddingMatrix.load(ws / EMBEDDING_FILE, vocab)


def cmd_encode(config):
    """Encode every selected sample as a pre-padded index row into the embedding table"""
    ws = _workspace(config)
    manifest = _load_manifest(config, ws)
    vocab, emb = _load_vectors(config, ws)
    dataset = encode_dataset(manifest.samples, vocab, emb, config.seq_len, config.truncate)

    stage_hash = _stage_hash(config, ws, "encode")
    np.save(ws / ENCODED_INDEX_FILE, dataset.indices)
    meta = {
        "seq_len": dataset.seq_len,
        "dimension": dataset.dimension,
        "num_classes": manifest.num_classes,
        "class_names": manifest.class_names(),
        "mode": manifest.mode,
    }
    write_records(ws / ENCODED_FILE, "encoded",
                  ({"id": i, "label": int(y)} for i, y in zip(dataset.ids, dataset.labels)),
                  stage_hash, meta)
    write_stamp(ws, "encode", stage_hash, [ENCODED_INDEX_FILE, ENCODED_FILE])
    log_with_timestamp(f"✅ Encoded {len(dataset)} samples as {dataset.seq_len}x{dataset.dimension}")
    return dataset


def _load_encoded(config, ws):
    stage_hash = _stage_hash(config, ws, "encode")
    require_stamp(ws, "encode", stage_hash)
    header, records = read_records(ws / ENCODED_FILE, "encoded", stage_hash, stage="encode")
    index_path = ws / ENCODED_INDEX_FILE
    if not index_path.exists():
        raise MissingArtifactError("encode", index_path)
    indices = np.load(index_path)
    if indices.shape[0] != len(records):
        raise DataError(f"{index_path} holds {indices.shape[0]} rows, {ENCODED_FILE} {len(records)} records")
    _, emb = _load_vectors(config, ws)
    dataset = EncodedDataset(indices, np.array([r["label"] for r in records], dtype=np.int64),
                             emb.vectors, [r["id"] for r in records])
    split_path = ws / SPLIT_FILE
    if not split_path.exists():
        raise MissingArtifactError("select", split_path)
    return dataset, DatasetSplit.load(split_path), header["meta"]


def cmd_train(config):
    """Train the configured RNN on the train split, monitoring the test split"""
    ws = _workspace(config)
    dataset, split, meta = _load_encoded(config, ws)
    num_classes = meta["num_classes"]
    train, test = dataset.subset(split.train), dataset.subset(split.test)

    model = RnnClassifier(config.model_config(num_classes), seed=derive_seed(config.seed, "init"))
    weights = compute_class_weights(train.labels, num_classes)
    schedule = config.training_schedule(weights, derive_seed(config.seed, "train"))
    _, history = fit(model, train, test, schedule)

    stage_hash = _stage_hash(config, ws, "train")
    save_weights(ws / WEIGHTS_FILE, model, stage_hash)
    history.save(ws / HISTORY_FILE, stage_hash)
    write_stamp(ws, "train", stage_hash, [WEIGHTS_FILE, HISTORY_FILE])
    log_with_timestamp(f"✅ Best epoch {history.best_epoch} of {len(history)}: "
                       f"test loss {history.test_loss[history.best_epoch - 1]:.4f}, "
                       f"test accuracy {history.test_accuracy[history.best_epoch - 1]:.4f}")
    return model, history


def _load_model(config, ws):
    stage_hash = _stage_hash(config, ws, "train")
    require_stamp(ws, "train", stage_hash)
    path = ws / WEIGHTS_FILE
    if not path.exists():
        raise MissingArtifactError("train", path)
    model, header = load_weights(path)
    if header.get("config_hash") != stage_hash:
        raise ConfigHashMismatchError(f"{path} was trained with config hash {header.get('config_hash')}, "
                                      f"current config hashes to {stage_hash}; re-run 'train'")
    return model


def cmd_evaluate(config):
    """Out-of-sample report on the validation split"""
    ws = _workspace(config)
    dataset, split, meta = _load_encoded(config, ws)
    model = _load_model(config, ws)
    validation = dataset.subset(split.validation)
    labels, _ = predict(model, validation)

    num_classes = meta["num_classes"]
    cm = confusion(validation.labels, labels, num_classes)
    rep = report(cm, meta["class_names"])
    supports = np.bincount(validation.labels, minlength=num_classes)
    baseline = baseline_accuracy(supports.tolist())

    text = format_report(rep) + f"\nmajority-class baseline accuracy: {baseline:.4f}\n"
    (ws / REPORT_TEXT_FILE).write_text(text, encoding="utf-8")
    save_report(ws / REPORT_FILE, rep, cm, _stage_hash(config, ws, "train"),
                meta={"split": "validation", "baseline_accuracy": baseline})
    save_confusion_grid(ws / CONFUSION_FILE, cm)

    log_metric("evaluate", accuracy=rep.accuracy, baseline=baseline, samples=int(cm.total))
    if not is_quiet():
        print(text, end="")
    if rep.flagged():
        log_with_timestamp(f"⚠️  Undefined precision/recall for classes: {', '.join(rep.flagged())}")
    log_with_timestamp(f"✅ Validation accuracy {rep.accuracy:.4f} (baseline {baseline:.4f})")
    return rep


def cmd_predict(config, paths, output=None):
    """Class probabilities for every function defined in the given IR files"""
    ws = _workspace(config)
    model = _load_model(config, ws)
    vocab, emb = _load_vectors(config, ws)
    overrides = load_metadata_overrides(config.metadata_overrides)

    records = []
    for path in paths:
        if not Path(path).is_file():
            raise ConfigError(f"IR file {path} not found")
        for stream in normalize_file(path, overrides):
            sample = encode_sample(stream.tokens, vocab, emb, model.config.seq_len,
                                   truncate=config.truncate)
            probs = model.forward(sample.matrix)
            records.append({
                "id": stream.id,
                "function_name": stream.function_name,
                "source_path": str(path),
                "label": int(np.argmax(probs)),
                "probabilities": [float(p) for p in probs],
            })

    output = Path(output) if output else ws / PREDICTIONS_FILE
    write_records(output, "predictions", records, _stage_hash(config, ws, "train"))
    log_with_timestamp(f"✅ {len(records)} prediction(s) written to {output}")
    return records


def cmd_run_all(config, input_dir=None):
    cmd_normalize(config, input_dir)
    cmd_select(config)
    cmd_embed(config)
    cmd_encode(config)
    cmd_train(config)
    return cmd_evaluate(config)


def cmd_fixture(output_dir, classes, per_class, seed, motif_strength=1.0):
    """Write synthetic IR files with Juliet-style names"""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    modules = generate_fixture_modules(seed, classes, per_class, motif_strength)
    for file_name, _, text in modules:
        (output_dir / file_name).write_text(text, encoding="utf-8")
    log_with_timestamp(f"✅ Wrote {len(modules)} fixture file(s) to {output_dir}")
    return len(modules)


def build_parser():
    parser = argparse.ArgumentParser(prog="vulnrnn", description=__doc__.split("\n\n")[0].strip(),
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--config", help="YAML config file (default: config.yaml if present)")
    parser.add_argument("--seed", type=int, help="Top-level seed (overrides config and environment)")
    parser.add_argument("--workspace", help="Workspace directory for stage artifacts")
    parser.add_argument("--quiet", action="store_true", help="Only print errors")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("normalize", help="IR files -> token records")
    p.add_argument("--input", help="Directory of .ll files (overrides input_dir)")
    sub.add_parser("select", help="Selection, labels, split")
    sub.add_parser("embed", help="Vocabulary and CBOW vectors")
    sub.add_parser("encode", help="Encode the selected samples")
    sub.add_parser("train", help="Train the RNN classifier")
    sub.add_parser("evaluate", help="Report on the validation split")
    p = sub.add_parser("predict", help="Classify the functions of raw IR files")
    p.add_argument("files", nargs="+")
    p.add_argument("--output", help="Predictions file (default: workspace/predictions.jsonl)")
    p = sub.add_parser("run-all", help="normalize -> select -> embed -> encode -> train -> evaluate")
    p.add_argument("--input", help="Directory of .ll files (overrides input_dir)")
    p = sub.add_parser("fixture", help="Write a synthetic IR corpus")
    p.add_argument("output_dir")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--motif-strength", type=float, default=1.0)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    set_quiet(args.quiet)
    try:
        if args.command == "fixture":
            cmd_fixture(args.output_dir, args.classes, args.per_class,
                        args.seed if args.seed is not None else 0, args.motif_strength)
            return 0

        config = load_config(args.config, {"seed": args.seed, "workspace": args.workspace,
                                           "input_dir": getattr(args, "input", None)})
        if args.command == "normalize":
            cmd_normalize(config)
        elif args.command == "select":
            cmd_select(config)
        elif args.command == "embed":
            cmd_embed(config)
        elif args.command == "encode":
            cmd_encode(config)
        elif args.command == "train":
            cmd_train(config)
        elif args.command == "evaluate":
            cmd_evaluate(config)
        elif args.command == "predict":
            cmd_predict(config, args.files, args.output)
        elif args.command == "run-all":
            cmd_run_all(config)
        return 0
    except VulnRnnError as exc:
        print(f"❌ {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"❌ {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.stdout.reconfigure(line_buffering=True)
    sys.exit(main())
