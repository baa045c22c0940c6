"""Synthetic reports and embeddings with known ground truth.

Positive reports carry a planted keyword in their conclusion; a matching
mock-server rule table is emitted alongside. Embedding bags hold Gaussian
instances, and positive bags contain at least one instance shifted along a
fixed sign pattern.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .conditions import SPINE_LEVELS
from .corpus import Report, segment_sections, write_corpus
from .evaluation import derive_seed
from .mil import EmbeddingSet, write_embeddings
from .mock_server import Rule, RuleTable

DEFAULT_KEYWORDS = ("metastasis", "metastatic deposit", "vertebral tumour")

_HISTORIES = (
    "Back pain for six weeks.",
    "Known breast carcinoma. ?metastasis",
    "Weight loss and night pain, ?cancer.",
    "Low back pain radiating to the left leg.",
)
_BODY = (
    "Sagittal T1 and T2 weighted images of the whole spine.",
    "Vertebral body heights are maintained.",
    "Mild degenerative disc disease in the lower lumbar spine.",
    "The conus terminates at a normal level.",
    "Normal alignment of the cervical and thoracic spine.",
)
_NEGATIVE_CONCLUSIONS = (
    "No suspicious marrow lesion.",
    "Degenerative change only.",
    "No cause for the symptoms identified.",
    "Stable appearances.",
)
_LAYOUTS = ("findings-conclusion", "impression", "plain", "summary")


def _report_text(rng: np.random.Generator, positive: bool, keyword: str | None) -> str:
    history = _HISTORIES[rng.integers(len(_HISTORIES))]
    body = " ".join(_BODY[j] for j in sorted(rng.choice(len(_BODY), 2, replace=False)))
    if positive:
        level = SPINE_LEVELS[rng.integers(len(SPINE_LEVELS))].split("-")[0]
        conclusion = f"Appearances in keeping with {keyword} involving {level}."
    else:
        conclusion = _NEGATIVE_CONCLUSIONS[rng.integers(len(_NEGATIVE_CONCLUSIONS))]
    layout = _LAYOUTS[rng.integers(len(_LAYOUTS))]
    if layout == "findings-conclusion":
        return f"CLINICAL HISTORY: {history}\nFINDINGS: {body}\nCONCLUSION: {conclusion}"
    if layout == "impression":
        return f"Clinical details: {history}\n{body}\nImpression - {conclusion}"
    if layout == "summary":
        return f"History:\n{history}\n\nReport:\n{body}\n\nSummary:\n{conclusion}"
    return f"{body} {conclusion}"


def generate_reports(n_reports: int, positive_rate: float, seed: int,
                     keywords: Sequence[str] = DEFAULT_KEYWORDS,
                     ) -> tuple[list[Report], dict[str, int]]:
    if n_reports < 0 or not 0.0 <= positive_rate <= 1.0:
        raise ValueError("need n_reports >= 0 and positive_rate in [0, 1]")
    rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "reports")))
    n_pos = int(round(positive_rate * n_reports))
    is_pos = np.zeros(n_reports, dtype=bool)
    is_pos[rng.choice(n_reports, n_pos, replace=False)] = True
    reports, truth = [], {}
    for i in range(n_reports):
        rid = f"study-{i:05d}"
        kw = keywords[rng.integers(len(keywords))] if is_pos[i] else None
        text = _report_text(rng, bool(is_pos[i]), kw)
        reports.append(Report(rid, f"patient-{i:05d}", rid, text,
                              tuple(segment_sections(text))))
        truth[rid] = int(is_pos[i])
    return reports, truth


def rule_table_for(keywords: Sequence[str] = DEFAULT_KEYWORDS) -> RuleTable:
    return RuleTable(
        tuple(Rule(k, 0.0, -4.0, f"The report describes {k}, indicating spinal cancer.")
              for k in keywords),
        default_logits=(-2.0, 0.0),
        default_summary="No features of spinal malignancy are described.",
    )


@dataclass
class SyntheticBags:
    embeddings: EmbeddingSet
    bag_labels: dict[str, int]
    instance_labels: dict[tuple[str, str], int]


def generate_bags(bag_labels: dict[str, int], dim: int = 64, shift: float = 2.0,
                  bag_size: tuple[int, int] = (5, 18), seed: int = 0,
                  sigma: float = 1.0) -> SyntheticBags:
    """One bag per id; instances are the bottom ``k`` spine levels.

    Noise is N(0, sigma^2 I). In positive bags between 1 and max(1, k // 3)
    instances are offset by ``shift * sigma`` in every coordinate, with a
    dataset-wide random sign per coordinate.
    """
    lo, hi = bag_size
    if not 1 <= lo <= hi <= len(SPINE_LEVELS):
        raise ValueError(f"bag sizes must lie within 1..{len(SPINE_LEVELS)}")
    rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "embeddings")))
    direction = rng.choice([-1.0, 1.0], size=dim)
    bag_ids, inst_ids, levels, rows = [], [], [], []
    inst_labels = {}
    for bid, label in bag_labels.items():
        k = int(rng.integers(lo, hi + 1))
        lv = SPINE_LEVELS[-k:]
        x = rng.normal(0.0, sigma, size=(k, dim))
        hot = np.zeros(k, dtype=bool)
        if label:
            m = int(rng.integers(1, max(1, k // 3) + 1))
            hot[rng.choice(k, m, replace=False)] = True
            x[hot] += shift * sigma * direction
        for j in range(k):
            bag_ids.append(bid)
            inst_ids.append(f"{bid}/{lv[j]}")
            levels.append(lv[j])
            rows.append(x[j])
            inst_labels[(bid, lv[j])] = int(hot[j])
    vecs = np.array(rows, dtype=np.float32).reshape(-1, dim)
    return SyntheticBags(EmbeddingSet(bag_ids, inst_ids, levels, vecs), dict(bag_labels),
                         inst_labels)


def gen_synthetic(out_dir: str | Path, n_reports: int = 200, positive_rate: float = 0.4,
                  seed: int = 7, keywords: Sequence[str] = DEFAULT_KEYWORDS,
                  dim: int = 64, shift: float = 2.0,
                  bag_size: tuple[int, int] = (5, 18)) -> dict[str, Path]:
    """Write corpus, ground truth, rule table and embeddings into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports, truth = generate_reports(n_reports, positive_rate, seed, keywords)
    bags = generate_bags(truth, dim, shift, bag_size, seed)
    paths = {
        "corpus": out / "corpus.jsonl",
        "truth": out / "truth.jsonl",
        "rules": out / "rules.json",
        "embeddings": out / "embeddings.txt",
    }
    write_corpus(reports, paths["corpus"])
    by_bag: dict[str, list[str]] = {}
    for (bid, lv), lab in bags.instance_labels.items():
        if lab:
            by_bag.setdefault(bid, []).append(lv)
    with open(paths["truth"], "w", encoding="utf-8", newline="\n") as fh:
        for rid, lab in truth.items():
            fh.write(json.dumps({"report_id": rid, "label": lab,
                                 "positive_levels": by_bag.get(rid, [])}) + "\n")
    rule_table_for(keywords).save(paths["rules"])
    write_embeddings(bags.embeddings, paths["embeddings"])
    return paths


def read_truth(path: str | Path) -> dict[str, int]:
    with open(path, encoding="utf-8") as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    return {r["report_id"]: int(r["label"]) for r in rows}
