"""ROC analysis, equal-error-rate calibration, summary metrics and splits.

Conventions used throughout: a score equal to the threshold is classified
positive, and tied (positive, negative) pairs count half towards AUROC.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

CALIBRATION = "calibration"
TEST = "test"
GENERATOR = "PCG64"


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class ScoredItem:
    id: str
    score: float
    label: int


class ScoredSet:
    """Scores with binary ground truth, stored as parallel arrays."""

    def __init__(self, ids: Sequence[str], scores: Sequence[float], labels: Sequence[int]):
        if not (len(ids) == len(scores) == len(labels)):
            raise ValueError("ids, scores and labels must have equal lengths")
        if len(set(ids)) != len(ids):
            raise ValueError("ids must be unique")
        self.ids = list(ids)
        self.scores = np.asarray(scores, dtype=float)
        self.labels = np.asarray(labels, dtype=int)
        if not np.all(np.isin(self.labels, (0, 1))):
            raise ValueError("labels must be 0 or 1")

    @classmethod
    def from_arrays(cls, scores, labels) -> "ScoredSet":
        return cls([str(i) for i in range(len(scores))], scores, labels)

    @classmethod
    def from_items(cls, items: Iterable[ScoredItem]) -> "ScoredSet":
        items = list(items)
        return cls([i.id for i in items], [i.score for i in items], [i.label for i in items])

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    @property
    def n_neg(self) -> int:
        return len(self) - self.n_pos

    def subset(self, ids: Iterable[str]) -> "ScoredSet":
        index = {k: i for i, k in enumerate(self.ids)}
        sel = [index[k] for k in ids]
        return ScoredSet([self.ids[i] for i in sel], self.scores[sel], self.labels[sel])


def _require_two_classes(s: ScoredSet) -> None:
    if len(s) == 0:
        raise DegenerateInputError("empty scored set")
    if s.n_pos == 0 or s.n_neg == 0:
        raise DegenerateInputError(
            f"need both classes, got {s.n_pos} positives and {s.n_neg} negatives"
        )


def auroc(s: ScoredSet) -> float:
    """Mann-Whitney estimate of P(score_pos > score_neg), ties counting half."""
    _require_two_classes(s)
    ranks = rankdata(s.scores, method="average")
    n_pos, n_neg = s.n_pos, s.n_neg
    u = ranks[s.labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass(frozen=True)
class RocPoint:
    threshold: float
    fpr: float
    tpr: float


@dataclass(frozen=True)
class RocAnalysis:
    points: tuple[RocPoint, ...]
    auroc: float
    eer: float
    eer_threshold: float

    @property
    def fpr(self) -> np.ndarray:
        return np.array([p.fpr for p in self.points])

    @property
    def tpr(self) -> np.ndarray:
        return np.array([p.tpr for p in self.points])

    @property
    def thresholds(self) -> np.ndarray:
        return np.array([p.threshold for p in self.points])


def candidate_thresholds(scores: np.ndarray) -> np.ndarray:
    """+inf, midpoints between consecutive distinct scores, -inf; descending."""
    distinct = np.unique(scores)[::-1]
    mids = (distinct[:-1] + distinct[1:]) / 2.0
    return np.concatenate(([np.inf], mids, [-np.inf]))


def counts_at(s: ScoredSet, thresholds: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(false positives, true positives) per threshold under the ``score >= t`` rule."""
    pos = np.sort(s.scores[s.labels == 1])
    neg = np.sort(s.scores[s.labels == 0])
    # count of scores >= t is n - (number strictly below t)
    tp = len(pos) - np.searchsorted(pos, thresholds, side="left")
    fp = len(neg) - np.searchsorted(neg, thresholds, side="left")
    return fp, tp


def rates_at(s: ScoredSet, thresholds: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(fpr, tpr) for each threshold under the ``score >= t`` rule."""
    fp, tp = counts_at(s, thresholds)
    return fp / s.n_neg, tp / s.n_pos


def select_eer(thresholds: np.ndarray, fp: np.ndarray, fn: np.ndarray,
               n_pos: int, n_neg: int) -> int:
    """Index minimising |fpr - fnr|; ties go to the smaller fpr + fnr, then the lower threshold.

    Rates are compared on the common denominator n_pos * n_neg, so equal
    rational gaps compare equal.
    """
    a = [int(x) * n_pos for x in fp]
    b = [int(x) * n_neg for x in fn]
    return min(range(len(thresholds)),
               key=lambda i: (abs(a[i] - b[i]), a[i] + b[i], thresholds[i]))


def roc_and_eer(s: ScoredSet) -> RocAnalysis:
    _require_two_classes(s)
    th = candidate_thresholds(s.scores)
    fp, tp = counts_at(s, th)
    fpr, tpr = fp / s.n_neg, tp / s.n_pos
    fnr = (s.n_pos - tp) / s.n_pos
    i = select_eer(th, fp, s.n_pos - tp, s.n_pos, s.n_neg)
    points = tuple(RocPoint(float(t), float(f), float(r)) for t, f, r in zip(th, fpr, tpr))
    return RocAnalysis(points, auroc(s), float((fpr[i] + fnr[i]) / 2.0), float(th[i]))


def apply_threshold(scores, threshold: float) -> np.ndarray:
    return (np.asarray(scores, dtype=float) >= threshold).astype(int)


def _confusion(preds, labels) -> tuple[int, int, int, int]:
    p = np.asarray(preds, dtype=int)
    y = np.asarray(labels, dtype=int)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.shape[0]} predictions vs {y.shape[0]} labels")
    tp = int(np.sum((p == 1) & (y == 1)))
    fp = int(np.sum((p == 1) & (y == 0)))
    fn = int(np.sum((p == 0) & (y == 1)))
    tn = int(np.sum((p == 0) & (y == 0)))
    return tp, fp, fn, tn


def balanced_accuracy(preds, labels) -> float:
    tp, fp, fn, tn = _confusion(preds, labels)
    if tp + fn == 0 or tn + fp == 0:
        raise DegenerateInputError("balanced accuracy needs both classes in the labels")
    return (tp / (tp + fn) + tn / (tn + fp)) / 2.0


def f1(preds, labels) -> float:
    tp, fp, fn, _ = _confusion(preds, labels)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class Metrics:
    auroc: float
    eer: float
    eer_threshold: float
    balanced_accuracy: float
    f1: float
    n: int
    n_pos: int
    n_neg: int
    n_calibration: int

    def to_dict(self) -> dict[str, Any]:
        def r6(x):
            return round(x, 6) if math.isfinite(x) else (None if math.isnan(x) else str(x))
        return {
            "auroc": r6(self.auroc),
            "eer": r6(self.eer),
            "eer_threshold": r6(self.eer_threshold),
            "balanced_accuracy": r6(self.balanced_accuracy),
            "f1": r6(self.f1),
            "counts": {"n": self.n, "positives": self.n_pos, "negatives": self.n_neg,
                       "calibration": self.n_calibration},
        }


def evaluate(s: ScoredSet, calibration: ScoredSet) -> Metrics:
    """Metrics on ``s`` using the EER threshold chosen on ``calibration``.

    AUROC and EER describe ``s`` itself; the threshold never sees ``s``.
    """
    if len(s) == 0:
        raise DegenerateInputError("empty evaluation set")
    cal = roc_and_eer(calibration)
    own = roc_and_eer(s)
    preds = apply_threshold(s.scores, cal.eer_threshold)
    return Metrics(own.auroc, own.eer, cal.eer_threshold,
                   balanced_accuracy(preds, s.labels), f1(preds, s.labels),
                   len(s), s.n_pos, s.n_neg, len(calibration))


def write_metrics(metrics: Metrics, path: str | Path, **extra) -> None:
    payload = {**metrics.to_dict(), **extra}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_roc_curve(roc: RocAnalysis, path: str | Path) -> None:
    """Two-column ``fpr tpr`` file, one point per line, for plotting."""
    lines = ["fpr\ttpr"] + [f"{p.fpr:.17g}\t{p.tpr:.17g}" for p in roc.points]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- splitting ----------------------------------------------------------------

def derive_seed(seed: int, label: str) -> int:
    """Child seed for a named consumer of a run-level seed."""
    h = hashlib.sha256(f"{int(seed)}:{label}".encode()).digest()
    return int.from_bytes(h[:8], "little")


def calibration_count(n: int, fraction: float) -> int:
    """round-half-up(fraction * n), clamped to leave one item on each side when n >= 2."""
    k = int(math.floor(fraction * n + 0.5))
    if n >= 2:
        k = min(max(k, 1), n - 1)
    return min(max(k, 0), n)


@dataclass(frozen=True)
class SplitAssignment:
    assignments: dict[str, str]
    seed: int
    fraction: float
    generator: str = GENERATOR

    def ids(self, split: str) -> list[str]:
        return [k for k, v in self.assignments.items() if v == split]


def stratified_split(ids: Sequence[str], labels: Sequence[int], fraction: float,
                     seed: int, names: tuple[str, str] = (CALIBRATION, TEST)) -> SplitAssignment:
    """Seeded per-class split; ``fraction`` of each class goes to ``names[0]``.

    Each class is shuffled with its own PCG64 stream so the assignment of one
    class does not depend on the size of the other.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    if len(ids) != len(labels):
        raise ValueError("ids and labels must have equal lengths")
    if len(set(ids)) != len(ids):
        raise ValueError("ids must be unique")
    assignment: dict[str, str] = {}
    for cls in sorted(set(int(y) for y in labels)):
        members = [i for i, y in zip(ids, labels) if int(y) == cls]
        rng = np.random.Generator(np.random.PCG64(derive_seed(seed, f"class-{cls}")))
        order = rng.permutation(len(members))
        k = calibration_count(len(members), fraction)
        for rank, j in enumerate(order):
            assignment[members[j]] = names[0] if rank < k else names[1]
    ordered = {i: assignment[i] for i in ids}
    return SplitAssignment(ordered, int(seed), float(fraction))


def write_split(split: SplitAssignment, path: str | Path) -> None:
    lines = [f"# seed={split.seed} fraction={split.fraction!r} generator={split.generator}"]
    lines += [f"{k}\t{v}" for k, v in split.assignments.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_split(path: str | Path) -> SplitAssignment:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header.startswith("#"):
            raise ValueError(f"{path}: missing split header line")
        meta = dict(tok.split("=", 1) for tok in header[1:].split())
        assignments = {}
        for line in fh:
            if line.strip():
                k, v = line.rstrip("\n").split("\t")
                assignments[k] = v
    return SplitAssignment(assignments, int(meta["seed"]), float(meta["fraction"]),
                           meta.get("generator", GENERATOR))


def scored_from_mapping(scores: Mapping[str, float], truth: Mapping[str, int],
                        ids: Iterable[str] | None = None) -> ScoredSet:
    ids = [k for k in (ids if ids is not None else scores) if k in truth]
    return ScoredSet(ids, [scores[k] for k in ids], [truth[k] for k in ids])
