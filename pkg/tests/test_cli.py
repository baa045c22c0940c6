import json
import subprocess
import sys

import pytest

from reportlabel.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, EXIT_TRANSPORT, main


def run_ok(*argv):
    assert main([str(a) for a in argv]) == EXIT_OK


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    run_ok("gen-synthetic", "--out-dir", d, "--reports", 60, "--dim", 16, "--seed", 3)
    return d


@pytest.fixture(scope="module")
def labelled(synth, synthetic_server, tmp_path_factory):
    d = tmp_path_factory.mktemp("labels")
    run_ok("label", "--corpus", synth / "corpus.jsonl", "--endpoint", synthetic_server.url,
           "--out-dir", d)
    return d


def test_gen_synthetic_outputs(synth):
    for name in ("corpus.jsonl", "truth.jsonl", "rules.json", "embeddings.txt",
                 "gen-synthetic.manifest.json"):
        assert (synth / name).exists()
    truth = [json.loads(x) for x in (synth / "truth.jsonl").read_text().splitlines()]
    assert len(truth) == 60 and sum(t["label"] for t in truth) == 24


def test_gen_synthetic_deterministic(tmp_path, synth):
    run_ok("gen-synthetic", "--out-dir", tmp_path, "--reports", 60, "--dim", 16, "--seed", 3)
    for name in ("corpus.jsonl", "truth.jsonl", "rules.json", "embeddings.txt"):
        assert (tmp_path / name).read_bytes() == (synth / name).read_bytes()


def test_label_then_split_calibrate_evaluate(synth, labelled, tmp_path):
    recs = [json.loads(x) for x in (labelled / "labels.jsonl").read_text().splitlines()]
    assert len(recs) == 60 and not any(r["error"] for r in recs)
    run_ok("split", "--truth", synth / "truth.jsonl", "--out-dir", tmp_path)
    run_ok("calibrate", "--labels", labelled / "labels.jsonl", "--truth", synth / "truth.jsonl",
           "--split", tmp_path / "split.tsv", "--out-dir", tmp_path)
    cal = json.loads((tmp_path / "calibration.json").read_text())
    assert cal["eer"] == 0.0
    run_ok("evaluate", "--labels", labelled / "labels.jsonl", "--truth", synth / "truth.jsonl",
           "--split", tmp_path / "split.tsv", "--out-dir", tmp_path)
    m = json.loads((tmp_path / "metrics.json").read_text())
    assert m["auroc"] == 1.0 and m["balanced_accuracy"] == 1.0
    assert m["counts"]["calibration"] + m["counts"]["n"] == 60


def test_label_with_calibration_file(synth, synthetic_server, tmp_path):
    (tmp_path / "cal.json").write_text('{"threshold": 0.9}')
    run_ok("label", "--corpus", synth / "corpus.jsonl", "--endpoint", synthetic_server.url,
           "--strategy", "direct-query", "--calibration-file", tmp_path / "cal.json",
           "--out-dir", tmp_path)
    recs = [json.loads(x) for x in (tmp_path / "labels.jsonl").read_text().splitlines()]
    assert {r["threshold"] for r in recs} == {0.9}
    assert all(r["summary"] is None for r in recs)


def test_summarize(synth, synthetic_server, tmp_path):
    run_ok("summarize", "--corpus", synth / "corpus.jsonl", "--endpoint", synthetic_server.url,
           "--out-dir", tmp_path)
    assert len((tmp_path / "summaries.jsonl").read_text().splitlines()) == 60


def test_svm_train_predict_roc(synth, labelled, tmp_path):
    run_ok("train-svm", "--embeddings", synth / "embeddings.txt",
           "--labels", labelled / "labels.jsonl", "--truth", synth / "truth.jsonl",
           "--out-dir", tmp_path)
    metrics = json.loads((tmp_path / "svm_metrics.json").read_text())
    assert metrics["join"]["matched"] == 60
    run_ok("predict-svm", "--model", tmp_path / "model.txt",
           "--embeddings", synth / "embeddings.txt", "--out-dir", tmp_path)
    assert len((tmp_path / "scores.jsonl").read_text().splitlines()) == 60
    run_ok("roc-export", "--scores", tmp_path / "scores.jsonl", "--truth", synth / "truth.jsonl",
           "--out-dir", tmp_path)
    lines = (tmp_path / "roc.tsv").read_text().splitlines()
    assert lines[0] == "fpr\ttpr" and lines[-1] == "1\t1"


def test_prep_finetune(synth, tmp_path):
    run_ok("prep-finetune", "--corpus", synth / "corpus.jsonl", "--out-dir", tmp_path)
    m = json.loads((tmp_path / "prep-finetune.manifest.json").read_text())
    assert m["summary"]["written"] + m["summary"]["skipped"] == 60


def test_config_errors_listed_together(tmp_path, capsys):
    code = main(["label", "--corpus", str(tmp_path / "missing.jsonl"), "--threshold", "2",
                 "--condition", "nothing", "--strategy", "guess"])
    err = capsys.readouterr().err
    assert code == EXIT_CONFIG
    for fragment in ("path does not exist", "threshold", "unknown condition", "strategy"):
        assert fragment in err


def test_missing_required(capsys):
    assert main(["evaluate"]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "'truth'" in err and "--calibration and --test" in err


def test_config_file_and_flag_precedence(synth, tmp_path):
    (tmp_path / "run.yaml").write_text(f"truth: {synth / 'truth.jsonl'}\nfraction: 0.3\n"
                                       f"seed: 5\nout_dir: {tmp_path}\n")
    run_ok("split", "--config", tmp_path / "run.yaml", "--fraction", "0.4")
    head = (tmp_path / "split.tsv").read_text().splitlines()[0]
    assert "fraction=0.4" in head


def test_manifest_rerun_is_byte_identical(synth, synthetic_server, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    run_ok("label", "--corpus", synth / "corpus.jsonl", "--endpoint", synthetic_server.url,
           "--max-in-flight", 1, "--out-dir", a)
    run_ok("label", "--config", a / "label.manifest.json", "--max-in-flight", 6,
           "--out-dir", b)
    assert (a / "labels.jsonl").read_bytes() == (b / "labels.jsonl").read_bytes()
    ma = json.loads((a / "label.manifest.json").read_text())
    mb = json.loads((b / "label.manifest.json").read_text())
    assert set(ma) == set(mb) and ma["seed"] == mb["seed"]


def test_bad_corpus_is_data_error(tmp_path, synthetic_server, capsys):
    (tmp_path / "c.jsonl").write_text('{"id": "a"}\n')
    code = main(["label", "--corpus", str(tmp_path / "c.jsonl"),
                 "--endpoint", synthetic_server.url, "--out-dir", str(tmp_path)])
    assert code == EXIT_DATA
    assert "line 1" in capsys.readouterr().err


def test_offline_server_is_transport_error(synth, tmp_path):
    code = main(["label", "--corpus", str(synth / "corpus.jsonl"),
                 "--endpoint", "http://127.0.0.1:9", "--retry-limit", "1", "--timeout", "1",
                 "--out-dir", str(tmp_path)])
    assert code == EXIT_TRANSPORT


def test_console_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "reportlabel.cli", "train-svm", "--help"],
                         capture_output=True, text=True, check=True).stdout
    assert "[config key: c_param" in out


def test_ivd_condition_from_cli(synth, synthetic_server, tmp_path):
    run_ok("label", "--corpus", synth / "corpus.jsonl", "--endpoint", synthetic_server.url,
           "--condition", "stenosis-ivd", "--strategy", "direct-query", "--out-dir", tmp_path)
    recs = [json.loads(x) for x in (tmp_path / "labels.jsonl").read_text().splitlines()]
    assert len(recs) == 180
    assert {r["level"] for r in recs} == {"L3-L4", "L4-L5", "L5-S1"}
    assert {r["condition"] for r in recs} == {"stenosis"}
