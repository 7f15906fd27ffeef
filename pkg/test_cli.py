#!/usr/bin/env python3
"""
End-to-end tests of the vulnrnn stages on synthetic IR corpora
"""

import json

import numpy as np
import pytest
import yaml

from cli import main
from config import ENV_OVERRIDES
from neural import load_weights

SMALL_RUN = {
    "min_class_count": 5,
    "min_tokens": 20,
    "seq_len": 40,
    "embedding_dimension": 8,
    "cbow_epochs": 2,
    "units": 8,
    "batch_size": 16,
    "learning_rate": 0.01,
    "max_epochs": 3,
}


@pytest.fixture(autouse=True)
def isolated(tmp_path, monkeypatch):
    """Run every test from an empty directory with no VULNRNN_* environment"""
    for name in ENV_OVERRIDES:
        monkeypatch.delenv(name, raising=False)
    monkeypatch.chdir(tmp_path)


def write_config(tmp_path, name="config.yaml", **overrides):
    values = dict(SMALL_RUN, input_dir=str(tmp_path / "ir"), **overrides)
    path = tmp_path / name
    path.write_text(yaml.safe_dump(values), encoding="utf-8")
    return str(path)


def make_fixture(tmp_path, per_class=30, classes=2, seed=0, name="ir"):
    assert main(["--quiet", "--seed", str(seed), "fixture", str(tmp_path / name),
                 "--classes", str(classes), "--per-class", str(per_class)]) == 0


def read_jsonl(path):
    lines = path.read_text(encoding="utf-8").splitlines()
    return json.loads(lines[0]), [json.loads(line) for line in lines[1:]]


def test_fixture_writes_one_file_per_sample(tmp_path):
    make_fixture(tmp_path, per_class=5, classes=3)
    files = sorted((tmp_path / "ir").glob("*.ll"))
    assert len(files) == 15
    assert files[0].name.startswith("CWE") and files[0].name.endswith("__good.ll")


def test_run_all_is_reproducible(tmp_path):
    make_fixture(tmp_path)
    config = write_config(tmp_path)
    for ws in ("ws1", "ws2"):
        assert main(["--quiet", "--config", config, "--workspace", str(tmp_path / ws), "run-all"]) == 0

    for artifact in ("tokens.jsonl", "manifest.jsonl", "split.txt", "embedding.txt", "encoded.npy",
                     "weights.bin", "history.jsonl", "report.txt", "report.jsonl", "confusion.csv"):
        first = (tmp_path / "ws1" / artifact).read_bytes()
        assert first == (tmp_path / "ws2" / artifact).read_bytes(), artifact

    header, (record,) = read_jsonl(tmp_path / "ws1" / "report.jsonl")
    assert header["meta"]["split"] == "validation"
    assert len(record["classes"]) == 2
    assert "majority-class baseline accuracy" in (tmp_path / "ws1" / "report.txt").read_text()


def test_stages_run_one_by_one_match_run_all(tmp_path):
    make_fixture(tmp_path, per_class=15)
    config = write_config(tmp_path)
    assert main(["--quiet", "--config", config, "--workspace", str(tmp_path / "ws1"), "run-all"]) == 0
    for stage in ("normalize", "select", "embed", "encode", "train", "evaluate"):
        assert main(["--quiet", "--config", config, "--workspace", str(tmp_path / "ws2"), stage]) == 0, stage

    for artifact in ("tokens.jsonl", "manifest.jsonl", "split.txt", "selection_log.txt", "cwe_table.txt",
                     "vocab.txt", "embedding.txt", "encoded.npy", "encoded.jsonl", "weights.bin",
                     "history.jsonl", "report.txt", "report.jsonl", "confusion.csv"):
        first = (tmp_path / "ws1" / artifact).read_bytes()
        assert first == (tmp_path / "ws2" / artifact).read_bytes(), artifact


def test_normalize_skips_malformed_files(tmp_path):
    make_fixture(tmp_path, per_class=5)
    (tmp_path / "ir" / "CWE121__broken__bad.ll").write_text("define i32 @f() {\n  ret i32 0\n",
                                                             encoding="utf-8")
    config = write_config(tmp_path)
    assert main(["--quiet", "--config", config, "normalize"]) == 0

    header, records = read_jsonl(tmp_path / "workspace" / "tokens.jsonl")
    # helper plus test function per fixture file
    assert len(records) == 20
    assert header["meta"] == {"files": 11, "failed": 1}
    assert all(not r["source_path"].startswith("/") for r in records)
    errors = (tmp_path / "workspace" / "normalize_errors.txt").read_text().splitlines()
    assert len(errors) == 1 and "CWE121__broken__bad.ll" in errors[0]


def test_normalize_empty_directory_is_a_data_error(tmp_path):
    (tmp_path / "ir").mkdir()
    assert main(["--quiet", "--config", write_config(tmp_path), "normalize"]) == 2


def test_normalize_missing_directory_is_a_user_error(tmp_path):
    assert main(["--quiet", "--config", write_config(tmp_path), "normalize"]) == 1


def test_stage_without_upstream_artifacts(tmp_path):
    config = write_config(tmp_path)
    assert main(["--quiet", "--config", config, "select"]) == 1
    assert main(["--quiet", "--config", config, "evaluate"]) == 1


def test_config_errors(tmp_path):
    assert main(["--quiet", "--config", str(tmp_path / "absent.yaml"), "select"]) == 1
    assert main(["--quiet", "--config", write_config(tmp_path, colour="blue"), "select"]) == 1
    assert main(["--quiet", "--config", write_config(tmp_path, rnn_layers=4), "select"]) == 1


def test_changed_config_is_detected_downstream(tmp_path):
    make_fixture(tmp_path, per_class=15)
    config = write_config(tmp_path)
    assert main(["--quiet", "--config", config, "run-all"]) == 0
    assert main(["--quiet", "--config", config, "--seed", "7", "evaluate"]) == 2


def test_renormalizing_another_corpus_invalidates_downstream(tmp_path):
    make_fixture(tmp_path, per_class=15)
    make_fixture(tmp_path, per_class=15, seed=1, name="ir_b")
    config = write_config(tmp_path)
    assert main(["--quiet", "--config", config, "run-all"]) == 0
    assert main(["--quiet", "--config", config, "evaluate"]) == 0

    assert main(["--quiet", "--config", config, "normalize", "--input", str(tmp_path / "ir_b")]) == 0
    for stage in ("evaluate", "train", "encode", "embed"):
        assert main(["--quiet", "--config", config, stage]) == 2, stage
    # the stage hashes follow the corpus, not the input_dir setting
    assert main(["--quiet", "--config", config, "select"]) == 0
    assert main(["--quiet", "--config", config, "embed"]) == 0


def test_edited_overrides_file_is_detected(tmp_path):
    make_fixture(tmp_path, per_class=15)
    overrides = tmp_path / "overrides.yaml"
    overrides.write_text("unused.ll:\n  cwe_id: 78\n  flaw_label: bad\n", encoding="utf-8")
    config = write_config(tmp_path, metadata_overrides=str(overrides))
    assert main(["--quiet", "--config", config, "normalize"]) == 0
    assert main(["--quiet", "--config", config, "select"]) == 0

    overrides.write_text("unused.ll:\n  cwe_id: 79\n  flaw_label: bad\n", encoding="utf-8")
    assert main(["--quiet", "--config", config, "select"]) == 2


def test_malformed_overrides_is_a_user_error(tmp_path):
    make_fixture(tmp_path, per_class=5)
    overrides = tmp_path / "overrides.yaml"
    overrides.write_text("x.ll:\n  cwe_id: seventy\n", encoding="utf-8")
    config = write_config(tmp_path, metadata_overrides=str(overrides))
    assert main(["--quiet", "--config", config, "normalize"]) == 1


def test_predict_reports_every_function(tmp_path):
    make_fixture(tmp_path, per_class=15)
    config = write_config(tmp_path)
    assert main(["--quiet", "--config", config, "run-all"]) == 0

    target = sorted((tmp_path / "ir").glob("*__bad.ll"))[0]
    output = tmp_path / "predictions.jsonl"
    assert main(["--quiet", "--config", config, "predict", str(target), "--output", str(output)]) == 0
    _, records = read_jsonl(output)
    assert len(records) == 2
    for r in records:
        assert len(r["probabilities"]) == 2
        assert sum(r["probabilities"]) == pytest.approx(1.0)
        assert r["label"] == int(np.argmax(r["probabilities"]))

    assert main(["--quiet", "--config", config, "predict", str(tmp_path / "nope.ll")]) == 1


def test_multiclass_training(tmp_path):
    make_fixture(tmp_path, per_class=12, classes=3)
    config = write_config(tmp_path, mode="multiclass", cell="GRU", bidirectional=True)
    for stage in ("normalize", "select", "embed", "encode", "train"):
        assert main(["--quiet", "--config", config, stage]) == 0, stage

    header, _ = read_jsonl(tmp_path / "workspace" / "encoded.jsonl")
    assert header["meta"]["num_classes"] == 3
    assert header["meta"]["mode"] == "multiclass"
    model, _ = load_weights(tmp_path / "workspace" / "weights.bin")
    assert model.config.num_classes == 3
    assert model.config.cell == "GRU" and model.config.bidirectional


@pytest.mark.slow
def test_motif_corpus_is_learned(tmp_path):
    make_fixture(tmp_path, per_class=100)
    config = write_config(tmp_path, seq_len=60, embedding_dimension=16, cbow_epochs=5,
                          units=16, max_epochs=40)
    assert main(["--quiet", "--config", config, "run-all"]) == 0
    _, (record,) = read_jsonl(tmp_path / "workspace" / "report.jsonl")
    assert record["accuracy"] >= 0.95
