"""Linear SVMs over precomputed image embeddings, per instance or per bag.

Scan-level conditions are learnt with the normalised set kernel: a bag is
represented by the L2-normalised mean of its instance embeddings, which with
a linear kernel gives k(X, Y) = <sum X, sum Y> / (|sum X| |sum Y|).
IVD-level conditions use one row per (study, level).

The SVM is trained in the dual by coordinate descent. The bias is learnt by
appending a constant 1 feature, so the optimised objective is

    0.5 * (|w|^2 + b^2) + sum_i C_i * max(0, 1 - y_i (w . x_i + b)).
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .conditions import ConditionSpec
from .evaluation import (
    Metrics,
    ScoredSet,
    SplitAssignment,
    evaluate,
    stratified_split,
    derive_seed,
)
from .gateway import LabelRecord

MODEL_MAGIC = "reportlabel-svm"
MODEL_VERSION = 1
BIAS_CONVENTION = "augmented-constant-1"
EMBEDDING_MAGIC = "#embeddings"

TRAIN, VALIDATION, TEST = "train", "validation", "test"


class EmbeddingFormatError(ValueError):
    pass


class DegenerateBagError(ValueError):
    pass


class JoinError(ValueError):
    pass


# -- embeddings ---------------------------------------------------------------

@dataclass
class EmbeddingSet:
    bag_ids: list[str]
    instance_ids: list[str]
    levels: list[str]
    vectors: np.ndarray  # (n, d) float32

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        n = len(self.bag_ids)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != n \
                or len(self.instance_ids) != n or len(self.levels) != n:
            raise EmbeddingFormatError("inconsistent embedding set shapes")
        if n and self.vectors.shape[1] < 1:
            raise EmbeddingFormatError("embedding dimension must be at least 1")
        if not np.all(np.isfinite(self.vectors)):
            raise EmbeddingFormatError("embeddings contain non-finite values")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.bag_ids)

    def bags(self, labels: Mapping[str, int] | None = None) -> list["Bag"]:
        groups: OrderedDict[str, list[int]] = OrderedDict()
        for i, b in enumerate(self.bag_ids):
            groups.setdefault(b, []).append(i)
        return [
            Bag(b, [self.instance(i) for i in idx],
                None if labels is None else labels.get(b))
            for b, idx in groups.items()
        ]

    def instance(self, i: int) -> "EmbeddingInstance":
        return EmbeddingInstance(self.bag_ids[i], self.instance_ids[i], self.levels[i],
                                 self.vectors[i])


@dataclass(frozen=True)
class EmbeddingInstance:
    bag_id: str
    instance_id: str
    level: str
    vector: np.ndarray


@dataclass
class Bag:
    bag_id: str
    instances: list[EmbeddingInstance]
    label: int | None = None

    def __post_init__(self):
        if not self.instances:
            raise DegenerateBagError(f"bag {self.bag_id!r} has no instances")
        if any(inst.bag_id != self.bag_id for inst in self.instances):
            raise ValueError(f"bag {self.bag_id!r} holds instances from another bag")

    @property
    def matrix(self) -> np.ndarray:
        return np.stack([inst.vector for inst in self.instances])


def read_embeddings(path: str | Path) -> EmbeddingSet:
    """Parse an embedding file.

    First line: ``#embeddings dim=<d> count=<n>``. Then ``n`` whitespace
    separated records ``bag_id instance_id level v1 ... vd``.
    """
    bag_ids, inst_ids, levels, rows = [], [], [], []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if not header or header[0] != EMBEDDING_MAGIC:
            raise EmbeddingFormatError(f"{path}: missing '{EMBEDDING_MAGIC}' header")
        try:
            meta = dict(tok.split("=", 1) for tok in header[1:])
            dim, count = int(meta["dim"]), int(meta["count"])
        except (KeyError, ValueError):
            raise EmbeddingFormatError(f"{path}: header must declare dim= and count=") from None
        if dim < 1:
            raise EmbeddingFormatError(f"{path}: dim must be at least 1")
        for lineno, line in enumerate(fh, start=2):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != dim + 3:
                raise EmbeddingFormatError(
                    f"{path}: line {lineno}: expected {dim} values, got {len(parts) - 3}"
                )
            bag_ids.append(parts[0])
            inst_ids.append(parts[1])
            levels.append(parts[2])
            try:
                rows.append(np.array(parts[3:], dtype=np.float32))
            except ValueError:
                raise EmbeddingFormatError(f"{path}: line {lineno}: bad number") from None
    if len(rows) != count:
        raise EmbeddingFormatError(f"{path}: header declares {count} records, found {len(rows)}")
    vectors = np.stack(rows) if rows else np.zeros((0, dim), dtype=np.float32)
    return EmbeddingSet(bag_ids, inst_ids, levels, vectors)


def write_embeddings(emb: EmbeddingSet, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{EMBEDDING_MAGIC} dim={emb.dim} count={len(emb)}\n")
        for b, i, lv, v in zip(emb.bag_ids, emb.instance_ids, emb.levels, emb.vectors):
            # 9 significant digits round-trip float32 exactly
            fh.write(f"{b} {i} {lv} " + " ".join(f"{x:.9g}" for x in v.tolist()) + "\n")


# -- normalised set kernel ----------------------------------------------------

def bag_embed(bag: Bag | np.ndarray) -> np.ndarray:
    """L2-normalised mean of the bag's instance vectors."""
    m = bag.matrix if isinstance(bag, Bag) else np.asarray(bag)
    if m.ndim != 2 or m.shape[0] == 0:
        raise DegenerateBagError("bag must be a non-empty (instances, dim) array")
    mean = m.astype(np.float64).mean(axis=0)
    norm = np.linalg.norm(mean)
    if not norm > 0:
        raise DegenerateBagError("bag mean is the zero vector")
    return mean / norm


# -- linear SVM ---------------------------------------------------------------

@dataclass(frozen=True)
class TrainingMeta:
    iterations: int
    final_violation: float
    converged: bool


@dataclass(frozen=True)
class SvmModel:
    weights: np.ndarray
    bias: float
    c_param: float
    training_meta: TrainingMeta = TrainingMeta(0, float("nan"), False)
    dual: np.ndarray | None = field(default=None, compare=False, repr=False)

    @property
    def dim(self) -> int:
        return self.weights.shape[0]

    def scaled(self, factor: float) -> "SvmModel":
        return SvmModel(self.weights * factor, self.bias * factor, self.c_param,
                        self.training_meta)


def _as_pm1(y) -> np.ndarray:
    y = np.asarray(y)
    vals = set(np.unique(y).tolist())
    if vals <= {0, 1}:
        y = np.where(y == 1, 1.0, -1.0)
    elif not vals <= {-1, 1}:
        raise ValueError(f"labels must be +/-1 (or 0/1), got {sorted(vals)}")
    return y.astype(float)


def _class_costs(y: np.ndarray, c_param: float, balanced: bool) -> np.ndarray:
    if not balanced:
        return np.full(len(y), c_param)
    n = len(y)
    n_pos = np.sum(y > 0)
    w = np.where(y > 0, n / (2.0 * n_pos), n / (2.0 * (n - n_pos)))
    return c_param * w


def train_linear_svm(X, y, c_param: float = 1.0, tolerance: float = 1e-4,
                     max_passes: int = 1000, seed: int = 0,
                     balanced: bool = False) -> SvmModel:
    """Fit a hinge-loss linear SVM by dual coordinate descent.

    Each pass visits every example once in a fresh seeded random order. The
    loop stops once the largest projected-gradient magnitude seen during a
    pass is at most ``tolerance``, or after ``max_passes`` passes.
    ``balanced=True`` scales each class's cost by inverse frequency.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("X must be a 2-D array")
    if not np.all(np.isfinite(X)):
        raise ValueError("features contain non-finite values")
    y = _as_pm1(y)
    if len(y) != X.shape[0]:
        raise ValueError("X and y have different lengths")
    if not (np.any(y > 0) and np.any(y < 0)):
        raise ValueError("training data must contain both classes")
    if not c_param > 0:
        raise ValueError("c_param must be positive")

    n, d = X.shape
    Xa = np.hstack([X, np.ones((n, 1))])
    qdiag = np.einsum("ij,ij->i", Xa, Xa)
    upper = _class_costs(y, c_param, balanced)
    alpha = np.zeros(n)
    w = np.zeros(d + 1)
    rng = np.random.Generator(np.random.PCG64(seed))

    violation = math.inf
    passes = 0
    while passes < max_passes:
        passes += 1
        violation = 0.0
        for i in rng.permutation(n):
            xi = Xa[i]
            g = y[i] * xi.dot(w) - 1.0
            a = alpha[i]
            if a <= 0.0:
                pg = min(g, 0.0)
            elif a >= upper[i]:
                pg = max(g, 0.0)
            else:
                pg = g
            if abs(pg) > violation:
                violation = abs(pg)
            if pg != 0.0:
                new = min(max(a - g / qdiag[i], 0.0), upper[i])
                w += (new - a) * y[i] * xi
                alpha[i] = new
        if violation <= tolerance:
            break

    meta = TrainingMeta(passes, float(violation), bool(violation <= tolerance))
    return SvmModel(w[:d].copy(), float(w[d]), float(c_param), meta, alpha)


def primal_objective(model: SvmModel, X, y, balanced: bool = False) -> float:
    """Objective minimised by :func:`train_linear_svm` (bias regularised too)."""
    X = np.asarray(X, dtype=np.float64)
    y = _as_pm1(y)
    margins = y * (X @ model.weights + model.bias)
    costs = _class_costs(y, model.c_param, balanced)
    reg = 0.5 * (model.weights.dot(model.weights) + model.bias ** 2)
    return float(reg + np.sum(costs * np.maximum(0.0, 1.0 - margins)))


def decision_scores(model: SvmModel, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.dim:
        raise ValueError(f"feature dimension {X.shape[1]} does not match model ({model.dim})")
    return X @ model.weights + model.bias


def save_model(model: SvmModel, path: str | Path) -> None:
    m = model.training_meta
    lines = [
        f"{MODEL_MAGIC} {MODEL_VERSION}",
        f"dim {model.dim}",
        f"c_param {model.c_param!r}",
        f"bias_convention {BIAS_CONVENTION}",
        f"iterations {m.iterations}",
        f"final_violation {m.final_violation!r}",
        f"converged {int(m.converged)}",
        f"bias {model.bias!r}",
        "weights",
        *(repr(float(v)) for v in model.weights),
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_model(path: str | Path) -> SvmModel:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    magic = lines[0].split()
    if len(magic) != 2 or magic[0] != MODEL_MAGIC:
        raise ValueError(f"{path}: not a model file")
    if int(magic[1]) != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model version {magic[1]}")
    head = {}
    i = 1
    while lines[i] != "weights":
        key, value = lines[i].split(" ", 1)
        head[key] = value
        i += 1
    if head.get("bias_convention") != BIAS_CONVENTION:
        raise ValueError(f"{path}: unknown bias convention {head.get('bias_convention')!r}")
    weights = np.array([float(v) for v in lines[i + 1:] if v.strip()])
    if len(weights) != int(head["dim"]):
        raise ValueError(f"{path}: expected {head['dim']} weights, found {len(weights)}")
    meta = TrainingMeta(int(head["iterations"]), float(head["final_violation"]),
                        bool(int(head["converged"])))
    return SvmModel(weights, float(head["bias"]), float(head["c_param"]), meta)


# -- condition classifiers ----------------------------------------------------

def train_val_test_split(ids: Sequence[str], labels: Sequence[int], val_fraction: float,
                         test_fraction: float, seed: int) -> dict[str, str]:
    """Stratified three-way split built from two two-way splits."""
    held = val_fraction + test_fraction
    if not 0 < held < 1:
        raise ValueError("validation + test fraction must lie in (0, 1)")
    first = stratified_split(ids, labels, 1.0 - held, derive_seed(seed, "train"),
                             names=(TRAIN, "held"))
    rest = first.ids("held")
    lab = dict(zip(ids, labels))
    second = stratified_split(rest, [lab[k] for k in rest], val_fraction / held,
                              derive_seed(seed, "validation"), names=(VALIDATION, TEST))
    out = dict(first.assignments)
    out.update(second.assignments)
    return out


@dataclass(frozen=True)
class JoinReport:
    matched: int
    unmatched_labels: int
    unlabelled_units: int

    @property
    def failure_rate(self) -> float:
        total = self.matched + self.unmatched_labels
        return self.unmatched_labels / total if total else 1.0


@dataclass
class ClassifierResult:
    model: SvmModel
    validation: Metrics
    test: Metrics
    join: JoinReport
    rows: dict[str, int]


def condition_features(emb: EmbeddingSet, cond: ConditionSpec,
                       ) -> tuple[list[tuple[str, str | None]], np.ndarray]:
    """Feature rows keyed by (study, level); level is None for scan-level conditions."""
    if not cond.is_ivd_level:
        bags = emb.bags()
        keys = [(b.bag_id, None) for b in bags]
        X = np.stack([bag_embed(b) for b in bags]) if bags else np.zeros((0, emb.dim))
        return keys, X
    wanted = set(cond.levels)
    groups: OrderedDict[tuple[str, str], list[int]] = OrderedDict()
    for i, (b, lv) in enumerate(zip(emb.bag_ids, emb.levels)):
        if lv in wanted:
            groups.setdefault((b, lv), []).append(i)
    keys = list(groups)
    if not keys:
        return [], np.zeros((0, emb.dim))
    X = np.stack([emb.vectors[idx].astype(np.float64).mean(axis=0) for idx in groups.values()])
    return keys, X


def _label_map(records: Iterable[LabelRecord], cond: ConditionSpec) -> dict:
    out = {}
    for r in records:
        if r.condition != cond.name or r.label is None or r.error:
            continue
        if cond.is_ivd_level:
            if r.level in cond.levels:
                out[(r.report_id, r.level)] = int(r.label)
        else:
            out[(r.report_id, None)] = int(r.label)
    return out


def train_condition_classifier(
    embeddings: EmbeddingSet | str | Path,
    labels: Sequence[LabelRecord],
    cond: ConditionSpec,
    splits: Mapping[str, str] | SplitAssignment,
    *,
    test_truth: Mapping[str, int] | Mapping[tuple[str, str], int] | None = None,
    c_param: float = 1.0,
    tolerance: float = 1e-4,
    max_passes: int = 1000,
    balanced: bool = False,
    seed: int = 0,
    max_join_failure: float = 0.10,
) -> ClassifierResult:
    """Train on report-derived labels, calibrate on validation, score the test split.

    ``splits`` maps study ids to ``train``/``validation``/``test``; all levels
    of a study share its split. Labels join to embedding bags by
    ``report_id == bag_id``. ``test_truth`` (keyed by study id, or by
    ``(study, level)`` for IVD conditions) overrides the report-derived labels
    on the test split, e.g. with manual annotations.
    """
    if not isinstance(embeddings, EmbeddingSet):
        embeddings = read_embeddings(embeddings)
    if isinstance(splits, SplitAssignment):
        splits = splits.assignments

    keys, X = condition_features(embeddings, cond)
    label_of = _label_map(labels, cond)
    key_set = set(keys)
    matched = sum(1 for k in label_of if k in key_set)
    report = JoinReport(matched, len(label_of) - matched,
                        sum(1 for k in keys if k not in label_of))
    if not label_of or report.failure_rate > max_join_failure:
        raise JoinError(
            f"{report.unmatched_labels} of {len(label_of)} labels did not join to embeddings "
            f"(limit {max_join_failure:.0%})"
        )

    if test_truth is not None:
        truth = {(k if isinstance(k, tuple) else (k, None)): int(v) for k, v in test_truth.items()}
    else:
        truth = {}

    rows: dict[str, list[int]] = {TRAIN: [], VALIDATION: [], TEST: []}
    y = np.zeros(len(keys), dtype=int)
    for i, key in enumerate(keys):
        split = splits.get(key[0])
        if split not in rows:
            continue
        if split == TEST and key in truth:
            y[i] = truth[key]
        elif key in label_of:
            y[i] = label_of[key]
        else:
            continue
        rows[split].append(i)

    tr = rows[TRAIN]
    model = train_linear_svm(X[tr], y[tr], c_param=c_param, tolerance=tolerance,
                             max_passes=max_passes, seed=seed, balanced=balanced)

    def scored(idx):
        ids = [f"{keys[i][0]}|{keys[i][1]}" if keys[i][1] else keys[i][0] for i in idx]
        return ScoredSet(ids, decision_scores(model, X[idx]), y[idx])

    val, test = scored(rows[VALIDATION]), scored(rows[TEST])
    return ClassifierResult(model, evaluate(val, val), evaluate(test, val), report,
                            {k: len(v) for k, v in rows.items()})
