"""Acceptance suite: one test per criterion, summarised at the end of the run."""

import time

import numpy as np
import pytest

from oracles import all_candidates, brute_auroc, enumerate_rates, projected_subgradient
from reportlabel.cli import EXIT_OK, main
from reportlabel.conditions import CANCER
from reportlabel.corpus import (
    Report,
    mask_text,
    prep_finetune_dataset,
    read_finetune_records,
)
from reportlabel.evaluation import (
    CALIBRATION,
    TEST,
    ScoredSet,
    apply_threshold,
    auroc,
    balanced_accuracy,
    evaluate,
    roc_and_eer,
    stratified_split,
)
from reportlabel.gateway import ClientConfig, label_corpus
from reportlabel.mil import (
    bag_embed,
    decision_scores,
    primal_objective,
    train_linear_svm,
)
from reportlabel.corpus import load_corpus
from reportlabel.synthetic import gen_synthetic, generate_bags, read_truth


def random_scored_set(rng, n_max):
    n = int(rng.integers(2, n_max + 1))
    labels = rng.integers(0, 2, n)
    labels[0], labels[1] = 1, 0
    scores = rng.integers(0, 8, n) / 8.0  # coarse grid, plenty of ties
    return ScoredSet.from_arrays(scores, labels)


@pytest.mark.criterion(1, "fast AUROC equals pairwise oracle within 1e-12 on 200 sets, < 5 s")
def test_metric_oracle_equivalence():
    rng = np.random.default_rng(20240101)
    sets = [random_scored_set(rng, 50) for _ in range(200)]
    t0 = time.perf_counter()
    fast = [auroc(s) for s in sets]
    elapsed = time.perf_counter() - t0
    worst = max(abs(f - brute_auroc(s.scores, s.labels)) for f, s in zip(fast, sets))
    assert worst <= 1e-12
    assert elapsed < 5.0


@pytest.mark.criterion(2, "EER threshold optimal over all candidates; perfect separation gives 0")
def test_eer_optimality():
    rng = np.random.default_rng(7)
    for _ in range(200):
        s = random_scored_set(rng, 30)
        r = roc_and_eer(s)
        f, n = enumerate_rates(s.scores, s.labels, r.eer_threshold)
        gaps = [abs(a - b) for a, b in
                (enumerate_rates(s.scores, s.labels, t) for t in all_candidates(s.scores))]
        # oracle rates are independent float divisions; allow one rounding step
        assert abs(f - n) <= min(gaps) + 1e-15
    sep = ScoredSet.from_arrays([0.95, 0.9, 0.7, 0.3, 0.2], [1, 1, 1, 0, 0])
    assert roc_and_eer(sep).eer == 0.0


@pytest.mark.criterion(3, "mock-server labelling of 200 synthetic reports: AUROC 1, test BA 1, < 60 s")
def test_end_to_end_labelling(tmp_path, synthetic_server):
    t0 = time.perf_counter()
    paths = gen_synthetic(tmp_path, n_reports=200, positive_rate=0.4, seed=7)
    reports = load_corpus(paths["corpus"])
    truth = read_truth(paths["truth"])
    cfg = ClientConfig(endpoint=synthetic_server.url, max_in_flight=8)
    records = label_corpus(reports, CANCER, "summary-query", cfg)
    assert not any(r.error for r in records)
    scored = ScoredSet([r.report_id for r in records], [r.p_yes for r in records],
                       [truth[r.report_id] for r in records])
    assert auroc(scored) == 1.0
    split = stratified_split(scored.ids, scored.labels, 0.5, seed=7)
    m = evaluate(scored.subset(split.ids(TEST)), scored.subset(split.ids(CALIBRATION)))
    assert m.balanced_accuracy == 1.0
    assert time.perf_counter() - t0 < 60.0


@pytest.mark.criterion(4, "EER threshold transferred from calibration split gives BA >= 0.95")
def test_threshold_transfer():
    rng = np.random.default_rng(42)

    def draw():
        scores = np.r_[rng.normal(0.7, 0.1, 500), rng.normal(0.3, 0.1, 500)]
        return ScoredSet.from_arrays(scores, np.r_[np.ones(500, int), np.zeros(500, int)])

    cal, test = draw(), draw()
    threshold = roc_and_eer(cal).eer_threshold
    ba = balanced_accuracy(apply_threshold(test.scores, threshold), test.labels)
    assert ba >= 0.95


@pytest.mark.criterion(5, "SVM: two-point w=1 b=0; 10 tiny instances match oracle; blobs separated")
def test_svm_correctness():
    m = train_linear_svm([[1.0], [-1.0]], [1, -1], c_param=100.0, tolerance=1e-10)
    assert abs(m.weights[0] - 1.0) <= 1e-2 and abs(m.bias) <= 1e-2

    rng = np.random.default_rng(11)
    for _ in range(10):
        n, d = int(rng.integers(4, 21)), int(rng.integers(1, 6))
        X = rng.normal(size=(n, d))
        y = np.where(X @ rng.normal(size=d) + 0.5 * rng.normal(size=n) > 0, 1.0, -1.0)
        y[0], y[1] = 1.0, -1.0
        c = float(rng.choice([0.1, 1.0, 10.0]))
        model = train_linear_svm(X, y, c_param=c, tolerance=1e-9, max_passes=200000)
        oracle, _ = projected_subgradient(X, y, c, 1_000_000)
        assert abs(primal_objective(model, X, y) - oracle) <= 1e-3

    X = np.vstack([rng.normal((-2.5, -2.5), 0.5, (100, 2)), rng.normal((2.5, 2.5), 0.5, (100, 2))])
    y = np.r_[-np.ones(100), np.ones(100)]
    model = train_linear_svm(X, y, c_param=10.0)
    assert np.mean(np.sign(decision_scores(model, X)) == y) == 1.0


@pytest.mark.criterion(6, "bag embedding unit norm, permutation and duplication invariant")
def test_nsk_properties():
    rng = np.random.default_rng(3)
    for _ in range(200):
        m = rng.normal(size=(int(rng.integers(1, 19)), int(rng.integers(1, 65))))
        e = bag_embed(m)
        assert abs(np.linalg.norm(e) - 1.0) <= 1e-6
        assert np.max(np.abs(bag_embed(m[rng.permutation(len(m))]) - e)) <= 1e-9
        k = int(rng.integers(2, 5))
        assert np.max(np.abs(bag_embed(np.repeat(m, k, axis=0)) - e)) <= 1e-9


@pytest.mark.criterion(7, "synthetic MIL benchmark (d=64, shift 2 sigma, 300/100 bags): AUROC >= 0.95")
def test_mil_benchmark():
    rng = np.random.default_rng(0)
    labels = {f"bag-{i:04d}": int(v) for i, v in enumerate(rng.permutation(np.r_[
        np.ones(200, int), np.zeros(200, int)]))}
    syn = generate_bags(labels, dim=64, shift=2.0, bag_size=(5, 18), seed=1)
    bags = syn.embeddings.bags(labels)
    X = np.stack([bag_embed(b) for b in bags])
    y = np.array([b.label for b in bags])
    model = train_linear_svm(X[:300], y[:300], c_param=1.0)
    test = ScoredSet.from_arrays(decision_scores(model, X[300:]), y[300:])
    assert auroc(test) >= 0.95


FINETUNE_CORPUS = [
    ("a", "Clinical history: back pain\nSUMMARY: mild L4-L5 stenosis."),
    ("b", "Clinical history: pain\nReport: normal\nSummary:\nNo abnormality."),
    ("c", "Clinical details: fall\nCollapse of T8 in keeping with fracture."),
    ("d", "summary - Metastasis at T10, cord compression ± edema."),
    ("e", "Normal study with no headers at all."),
    ("f", "HISTORY: trauma\n  Summary: unremarkable spine"),
]
SUMMARIES = {"a": "mild L4-L5 stenosis.", "b": "No abnormality.",
             "d": "Metastasis at T10, cord compression ± edema.", "f": "unremarkable spine"}


@pytest.mark.criterion(8, "fine-tune prep on 6 reports writes 4 records whose masks round-trip")
def test_finetune_prep(tmp_path):
    reports = [Report.from_text(i, t) for i, t in FINETUNE_CORPUS]
    stats = prep_finetune_dataset(reports, tmp_path / "ft.jsonl")
    assert stats == {"written": 4, "skipped": 2}
    recs = read_finetune_records(tmp_path / "ft.jsonl")
    assert {r["report_id"]: mask_text(r) for r in recs} == SUMMARIES


PIPELINE = [
    ("label", ["--corpus", "{A}/corpus.jsonl", "--endpoint", "{URL}"]),
    ("split", ["--truth", "{A}/truth.jsonl", "--seed", "5"]),
    ("calibrate", ["--labels", "{A}/labels.jsonl", "--truth", "{A}/truth.jsonl",
                   "--split", "{A}/split.tsv"]),
    ("evaluate", ["--labels", "{A}/labels.jsonl", "--truth", "{A}/truth.jsonl",
                  "--split", "{A}/split.tsv"]),
    ("train-svm", ["--embeddings", "{A}/embeddings.txt", "--labels", "{A}/labels.jsonl"]),
    ("predict-svm", ["--model", "{A}/model.txt", "--embeddings", "{A}/embeddings.txt"]),
    ("roc-export", ["--scores", "{A}/scores.jsonl", "--truth", "{A}/truth.jsonl"]),
    ("prep-finetune", ["--corpus", "{A}/corpus.jsonl"]),
]


@pytest.mark.criterion(9, "pipeline re-run from its manifests reproduces every output byte for byte")
def test_determinism(tmp_path, synthetic_server):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["gen-synthetic", "--out-dir", str(a), "--reports", "80", "--seed", "9"]) == EXIT_OK
    for cmd, args in PIPELINE:
        argv = [x.format(A=a, URL=synthetic_server.url) for x in args]
        assert main([cmd, *argv, "--out-dir", str(a)]) == EXIT_OK
    for cmd, _ in [("gen-synthetic", None)] + PIPELINE:
        assert main([cmd, "--config", str(a / f"{cmd}.manifest.json"),
                     "--out-dir", str(b)]) == EXIT_OK
    outputs = sorted(p.name for p in a.iterdir() if not p.name.endswith(".manifest.json"))
    assert outputs == sorted(p.name for p in b.iterdir() if not p.name.endswith(".manifest.json"))
    assert len(outputs) >= 14
    for name in outputs:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
