"""Command-line entry point: ``reportlabel <subcommand> [--config FILE] [flags]``.

Every flag can also be set in the run config file (JSON or YAML) under the key
shown in ``--help``; flags given on the command line win. Each run writes its
outputs plus ``<subcommand>.manifest.json`` into ``--out-dir``. A manifest can
be passed back as ``--config`` to repeat the run.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable

from . import __version__
from .conditions import BUILTIN_CONDITIONS, ConditionError, ConditionSpec, load_conditions, \
    read_structured
from .corpus import CorpusError, HISTORY_KEYWORDS, SUMMARY_KEYWORDS, load_corpus, \
    prep_finetune_dataset
from .evaluation import (
    DegenerateInputError,
    ScoredSet,
    derive_seed,
    evaluate,
    read_split,
    roc_and_eer,
    stratified_split,
    write_metrics,
    write_roc_curve,
    write_split,
    CALIBRATION,
    TEST,
)
from .gateway import (
    ClientConfig,
    TransportError,
    label_corpus,
    read_labels,
    summarize_corpus,
    write_labels,
)
from .mil import (
    EmbeddingFormatError,
    JoinError,
    condition_features,
    decision_scores,
    load_model,
    read_embeddings,
    save_model,
    train_condition_classifier,
    train_val_test_split,
)
from .mock_server import RuleTable, MockServer
from .prompting import Strategy
from .synthetic import gen_synthetic, read_truth

logger = logging.getLogger("reportlabel")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_DATA, EXIT_TRANSPORT = 0, 1, 2, 3, 4


class ConfigError(Exception):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("\n".join(f"  - {p}" for p in problems))


# (flag, config key, type, default, help)
OPTIONS: dict[str, tuple[str, Any, Any, str]] = {
    "corpus": ("--corpus", Path, None, "report corpus, one JSON object per line"),
    "conditions_file": ("--conditions-file", Path, None,
                        "JSON/YAML list of condition definitions (defaults: built-ins)"),
    "condition": ("--condition", str, "cancer", "condition name to process"),
    "strategy": ("--strategy", str, "summary-query", "direct-query or summary-query"),
    "endpoint": ("--endpoint", str, "http://127.0.0.1:8000", "inference server base URL"),
    "model_name": ("--model-name", str, "local-model", "model name sent to the server"),
    "max_in_flight": ("--max-in-flight", int, 4, "concurrent requests"),
    "top_logprobs": ("--top-logprobs", int, 20, "top-k logprobs to request"),
    "retry_limit": ("--retry-limit", int, 3, "attempts per request"),
    "timeout": ("--timeout", float, 60.0, "request timeout in seconds"),
    "threshold": ("--threshold", float, 0.5, "decision threshold on p_yes"),
    "calibration_file": ("--calibration-file", Path, None,
                         "calibration.json whose threshold overrides --threshold"),
    "seed": ("--seed", int, 0, "run-level seed; sub-seeds are derived from it"),
    "fraction": ("--fraction", float, 0.5, "calibration fraction for split"),
    "out_dir": ("--out-dir", Path, Path("."), "output directory"),
    "labels": ("--labels", Path, None, "label file"),
    "truth": ("--truth", Path, None, "ground-truth file (report_id, label per line)"),
    "split": ("--split", Path, None, "split assignment file"),
    "calibration": ("--calibration", Path, None, "label file used to pick the threshold"),
    "test": ("--test", Path, None, "label file to evaluate"),
    "scores": ("--scores", Path, None, "label or score file for roc-export"),
    "embeddings": ("--embeddings", Path, None, "embedding file"),
    "model": ("--model", Path, None, "SVM model file"),
    "c_param": ("--c-param", float, 1.0, "SVM cost parameter"),
    "tolerance": ("--tolerance", float, 1e-4, "SVM KKT tolerance"),
    "max_passes": ("--max-passes", int, 1000, "SVM maximum passes"),
    "balanced": ("--balanced", bool, False, "inverse-frequency class costs"),
    "val_fraction": ("--val-fraction", float, 0.2, "validation fraction for train-svm"),
    "test_fraction": ("--test-fraction", float, 0.2, "test fraction for train-svm"),
    "max_join_failure": ("--max-join-failure", float, 0.10,
                         "abort train-svm above this fraction of unjoined labels"),
    "rules": ("--rules", Path, None, "mock-server rule table"),
    "host": ("--host", str, "127.0.0.1", "mock-server bind address"),
    "port": ("--port", int, 8000, "mock-server port"),
    "reports": ("--reports", int, 200, "gen-synthetic: number of reports"),
    "positive_rate": ("--positive-rate", float, 0.4, "gen-synthetic: positive fraction"),
    "dim": ("--dim", int, 64, "gen-synthetic: embedding dimension"),
    "shift": ("--shift", float, 2.0, "gen-synthetic: positive-instance shift in sigmas"),
    "summary_keywords": ("--summary-keywords", str, ",".join(SUMMARY_KEYWORDS),
                         "comma-separated summary headers"),
    "history_keywords": ("--history-keywords", str, ",".join(HISTORY_KEYWORDS),
                         "comma-separated clinical-history headers"),
}

COMMON = ("out_dir", "seed")

COMMANDS: dict[str, tuple[str, tuple[str, ...], tuple[str, ...]]] = {
    # name: (help, option keys, required keys)
    "label": ("label a corpus via the inference server",
              ("corpus", "conditions_file", "condition", "strategy", "endpoint", "model_name",
               "max_in_flight", "top_logprobs", "retry_limit", "timeout", "threshold",
               "calibration_file", "summary_keywords", "history_keywords"), ("corpus",)),
    "summarize": ("generate condition-focused summaries",
                  ("corpus", "conditions_file", "condition", "endpoint", "model_name",
                   "max_in_flight", "retry_limit", "timeout", "summary_keywords",
                   "history_keywords"), ("corpus",)),
    "calibrate": ("pick the EER threshold on the calibration split",
                  ("labels", "truth", "split"), ("labels", "truth")),
    "evaluate": ("metrics with a calibration-derived threshold",
                 ("calibration", "test", "labels", "truth", "split"), ("truth",)),
    "split": ("stratified calibration/test split", ("truth", "fraction"), ("truth",)),
    "prep-finetune": ("write summary-masked fine-tuning records",
                      ("corpus", "summary_keywords", "history_keywords"), ("corpus",)),
    "train-svm": ("train a linear / NSK SVM on report-derived labels",
                  ("embeddings", "labels", "truth", "split", "conditions_file", "condition",
                   "c_param", "tolerance", "max_passes", "balanced", "val_fraction",
                   "test_fraction", "max_join_failure"), ("embeddings", "labels")),
    "predict-svm": ("score embeddings with a trained model",
                    ("model", "embeddings", "conditions_file", "condition"),
                    ("model", "embeddings")),
    "roc-export": ("write a two-column ROC curve file", ("scores", "truth"),
                   ("scores", "truth")),
    "mock-server": ("run the deterministic mock inference server",
                    ("rules", "host", "port"), ("rules",)),
    "gen-synthetic": ("write a synthetic corpus, truth, rules and embeddings",
                      ("reports", "positive_rate", "dim", "shift"), ()),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reportlabel", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (help_text, keys, _) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", type=Path, help="run config (JSON/YAML) or a previous manifest")
        for key in keys + COMMON:
            flag, typ, default, help_ = OPTIONS[key]
            text = f"{help_} [config key: {key}; default: {default}]"
            if typ is bool:
                p.add_argument(flag, dest=key, action="store_true", default=argparse.SUPPRESS,
                               help=text)
            else:
                p.add_argument(flag, dest=key, type=typ, default=argparse.SUPPRESS, help=text)
    return parser


def _coerce(key: str, value: Any) -> Any:
    typ = OPTIONS[key][1]
    if value is None:
        return None
    if typ is Path:
        return Path(value)
    if key.endswith("_keywords") and isinstance(value, (list, tuple)):
        return ",".join(value)
    return typ(value)


def resolve_config(command: str, args: argparse.Namespace) -> dict[str, Any]:
    """Merge defaults, config file and flags, then validate everything at once."""
    _, keys, required = COMMANDS[command]
    keys = keys + COMMON
    cfg = {k: OPTIONS[k][2] for k in keys}
    problems: list[str] = []
    file_cfg: dict[str, Any] = {}
    if getattr(args, "config", None):
        try:
            raw = read_structured(args.config)
        except (OSError, ValueError) as exc:
            raise ConfigError([f"cannot read config {args.config}: {exc}"]) from None
        if isinstance(raw, dict) and "config" in raw and "command" in raw:
            raw = raw["config"]
        if not isinstance(raw, dict):
            raise ConfigError([f"config {args.config} must hold a mapping"])
        file_cfg = {k: v for k, v in raw.items() if k in keys}
    for k, v in file_cfg.items():
        try:
            cfg[k] = _coerce(k, v)
        except (TypeError, ValueError):
            problems.append(f"config key {k!r}: cannot interpret {v!r}")
    for k in keys:
        if hasattr(args, k):
            cfg[k] = getattr(args, k)

    for k in required:
        if cfg.get(k) is None:
            problems.append(f"missing required setting {k!r} ({OPTIONS[k][0]})")
    for k in keys:
        if OPTIONS[k][1] is Path and cfg.get(k) is not None and k != "out_dir" \
                and not Path(cfg[k]).exists():
            problems.append(f"{k}: path does not exist: {cfg[k]}")
    if "strategy" in cfg and cfg["strategy"] not in ("direct-query", "summary-query"):
        problems.append(f"strategy must be direct-query or summary-query, got {cfg['strategy']!r}")
    if "threshold" in cfg and not 0.0 <= cfg["threshold"] <= 1.0:
        problems.append("threshold must lie in [0, 1]")
    if "fraction" in cfg and not 0.0 < cfg["fraction"] < 1.0:
        problems.append("fraction must lie in (0, 1)")
    if "max_in_flight" in cfg and cfg["max_in_flight"] < 1:
        problems.append("max_in_flight must be >= 1")
    if "top_logprobs" in cfg and cfg["top_logprobs"] < 2:
        problems.append("top_logprobs must be >= 2")
    if "c_param" in cfg and not cfg["c_param"] > 0:
        problems.append("c_param must be positive")
    if command == "evaluate" and not (cfg.get("calibration") and cfg.get("test")) \
            and not (cfg.get("labels") and cfg.get("split")):
        problems.append("evaluate needs --calibration and --test, or --labels and --split")
    if "condition" in cfg:
        try:
            conds = _conditions(cfg)
            if cfg["condition"] not in conds:
                problems.append(f"unknown condition {cfg['condition']!r}; "
                                f"known: {', '.join(sorted(conds))}")
        except (ConditionError, OSError, ValueError) as exc:
            problems.append(f"conditions: {exc}")
    out_dir = Path(cfg["out_dir"])
    if out_dir.exists() and not out_dir.is_dir():
        problems.append(f"out_dir is not a directory: {out_dir}")
    if problems:
        raise ConfigError(problems)
    return cfg


def _conditions(cfg: dict[str, Any]) -> dict[str, ConditionSpec]:
    if cfg.get("conditions_file"):
        return load_conditions(cfg["conditions_file"])
    return dict(BUILTIN_CONDITIONS)


def _condition(cfg) -> ConditionSpec:
    return _conditions(cfg)[cfg["condition"]]


def _keywords(cfg) -> dict[str, list[str]]:
    return {
        "summary_keywords": [k.strip() for k in cfg["summary_keywords"].split(",") if k.strip()],
        "history_keywords": [k.strip() for k in cfg["history_keywords"].split(",") if k.strip()],
    }


def _client_config(cfg) -> ClientConfig:
    return ClientConfig(
        endpoint=cfg["endpoint"], model_name=cfg["model_name"],
        max_in_flight=cfg["max_in_flight"], top_logprobs=cfg.get("top_logprobs", 20),
        retry_limit=cfg["retry_limit"], timeout=cfg["timeout"],
        seed=derive_seed(cfg["seed"], "generation") % 2**31,
    )


def _read_scores(path: Path) -> dict[str, float]:
    """Map id -> score from a label file (``p_yes``) or a score file (``score``)."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            key = d.get("report_id", d.get("id"))
            if d.get("level"):
                key = f"{key}|{d['level']}"
            score = d.get("p_yes", d.get("score"))
            if score is not None:
                out[key] = float(score)
    return out


def _scored(scores: dict[str, float], truth: dict[str, int], ids=None) -> ScoredSet:
    ids = [k for k in (ids if ids is not None else scores) if k in truth and k in scores]
    return ScoredSet(ids, [scores[k] for k in ids], [truth[k] for k in ids])


# -- subcommands ----------------------------------------------------------------

def cmd_label(cfg, out: Path) -> dict[str, Any]:
    cond = _condition(cfg)
    reports = load_corpus(cfg["corpus"], **_keywords(cfg))
    threshold = cfg["threshold"]
    if cfg.get("calibration_file"):
        threshold = float(read_structured(cfg["calibration_file"])["threshold"])
    records = label_corpus(reports, cond, cfg["strategy"], _client_config(cfg), threshold)
    path = out / "labels.jsonl"
    write_labels(records, path)
    errors = sum(1 for r in records if r.error)
    if records and all((r.error or "").startswith("TransportError") for r in records):
        raise TransportError(f"every request failed; see {path}")
    return {"outputs": [path], "records": len(records), "errors": errors}


def cmd_summarize(cfg, out: Path) -> dict[str, Any]:
    cond = _condition(cfg)
    reports = load_corpus(cfg["corpus"], **_keywords(cfg))
    rows = summarize_corpus(reports, cond, _client_config(cfg))
    path = out / "summaries.jsonl"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in rows:
            fh.write(json.dumps(r, ensure_ascii=False) + "\n")
    return {"outputs": [path], "records": len(rows)}


def cmd_calibrate(cfg, out: Path) -> dict[str, Any]:
    scores = _read_scores(cfg["labels"])
    truth = read_truth(cfg["truth"])
    ids = read_split(cfg["split"]).ids(CALIBRATION) if cfg.get("split") else None
    roc = roc_and_eer(_scored(scores, truth, ids))
    path = out / "calibration.json"
    path.write_text(json.dumps({"threshold": roc.eer_threshold, "eer": roc.eer,
                                "auroc": roc.auroc, "n": len(roc.points)},
                               indent=2, sort_keys=True) + "\n", encoding="utf-8")
    labelled = out / "labels.calibrated.jsonl"
    write_labels([r.with_threshold(roc.eer_threshold) for r in read_labels(cfg["labels"])],
                 labelled)
    return {"outputs": [path, labelled], "threshold": roc.eer_threshold}


def cmd_evaluate(cfg, out: Path) -> dict[str, Any]:
    truth = read_truth(cfg["truth"])
    if cfg.get("calibration") and cfg.get("test"):
        cal = _scored(_read_scores(cfg["calibration"]), truth)
        test = _scored(_read_scores(cfg["test"]), truth)
    else:
        scores = _read_scores(cfg["labels"])
        split = read_split(cfg["split"])
        cal = _scored(scores, truth, split.ids(CALIBRATION))
        test = _scored(scores, truth, split.ids(TEST))
    metrics = evaluate(test, cal)
    path = out / "metrics.json"
    write_metrics(metrics, path)
    return {"outputs": [path], **metrics.to_dict()}


def cmd_split(cfg, out: Path) -> dict[str, Any]:
    truth = read_truth(cfg["truth"])
    split = stratified_split(list(truth), list(truth.values()), cfg["fraction"],
                             derive_seed(cfg["seed"], "split"))
    path = out / "split.tsv"
    write_split(split, path)
    return {"outputs": [path]}


def cmd_prep_finetune(cfg, out: Path) -> dict[str, Any]:
    reports = load_corpus(cfg["corpus"], **_keywords(cfg))
    path = out / "finetune.jsonl"
    stats = prep_finetune_dataset(reports, path)
    return {"outputs": [path], **stats}


def cmd_train_svm(cfg, out: Path) -> dict[str, Any]:
    cond = _condition(cfg)
    emb = read_embeddings(cfg["embeddings"])
    labels = read_labels(cfg["labels"])
    if cfg.get("split"):
        splits = read_split(cfg["split"]).assignments
    else:
        by_study: dict[str, int] = {}
        for r in labels:
            if r.condition == cond.name and r.label is not None:
                by_study[r.report_id] = max(by_study.get(r.report_id, 0), int(r.label))
        study_set = set(emb.bag_ids)
        ids = [k for k in by_study if k in study_set]
        splits = train_val_test_split(ids, [by_study[k] for k in ids], cfg["val_fraction"],
                                      cfg["test_fraction"], derive_seed(cfg["seed"], "svm-split"))
    truth = read_truth(cfg["truth"]) if cfg.get("truth") else None
    result = train_condition_classifier(
        emb, labels, cond, splits, test_truth=truth, c_param=cfg["c_param"],
        tolerance=cfg["tolerance"], max_passes=cfg["max_passes"], balanced=cfg["balanced"],
        seed=derive_seed(cfg["seed"], "svm"), max_join_failure=cfg["max_join_failure"],
    )
    model_path, metrics_path, split_path = (out / "model.txt", out / "svm_metrics.json",
                                            out / "svm_split.tsv")
    save_model(result.model, model_path)
    payload = {
        "validation": result.validation.to_dict(),
        "test": result.test.to_dict(),
        "join": {"matched": result.join.matched,
                 "unmatched_labels": result.join.unmatched_labels,
                 "unlabelled_units": result.join.unlabelled_units},
        "rows": result.rows,
        "training": {"iterations": result.model.training_meta.iterations,
                     "final_violation": result.model.training_meta.final_violation,
                     "converged": result.model.training_meta.converged},
    }
    metrics_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                            encoding="utf-8")
    split_path.write_text("".join(f"{k}\t{v}\n" for k, v in splits.items()), encoding="utf-8")
    return {"outputs": [model_path, metrics_path, split_path], "test_auroc": result.test.auroc}


def cmd_predict_svm(cfg, out: Path) -> dict[str, Any]:
    cond = _condition(cfg)
    model = load_model(cfg["model"])
    keys, X = condition_features(read_embeddings(cfg["embeddings"]), cond)
    scores = decision_scores(model, X) if len(keys) else []
    path = out / "scores.jsonl"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for (study, level), s in zip(keys, scores):
            fh.write(json.dumps({"id": study, "level": level, "score": float(s)}) + "\n")
    return {"outputs": [path], "records": len(keys)}


def cmd_roc_export(cfg, out: Path) -> dict[str, Any]:
    roc = roc_and_eer(_scored(_read_scores(cfg["scores"]), read_truth(cfg["truth"])))
    path = out / "roc.tsv"
    write_roc_curve(roc, path)
    return {"outputs": [path], "auroc": roc.auroc, "eer": roc.eer}


def cmd_mock_server(cfg, out: Path) -> dict[str, Any]:
    table = RuleTable.load(cfg["rules"])
    server = MockServer(table, cfg["host"], cfg["port"])
    print(f"mock server listening on {server.url}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return {"outputs": []}


def cmd_gen_synthetic(cfg, out: Path) -> dict[str, Any]:
    paths = gen_synthetic(out, cfg["reports"], cfg["positive_rate"], cfg["seed"],
                          dim=cfg["dim"], shift=cfg["shift"])
    return {"outputs": list(paths.values())}


HANDLERS: dict[str, Callable[[dict, Path], dict]] = {
    "label": cmd_label,
    "summarize": cmd_summarize,
    "calibrate": cmd_calibrate,
    "evaluate": cmd_evaluate,
    "split": cmd_split,
    "prep-finetune": cmd_prep_finetune,
    "train-svm": cmd_train_svm,
    "predict-svm": cmd_predict_svm,
    "roc-export": cmd_roc_export,
    "mock-server": cmd_mock_server,
    "gen-synthetic": cmd_gen_synthetic,
}


def _jsonable(cfg: dict[str, Any]) -> dict[str, Any]:
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(cfg.items())}


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def run(command: str, cfg: dict[str, Any]) -> dict[str, Any]:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    started = datetime.now(timezone.utc).isoformat()
    result = HANDLERS[command](cfg, out)
    cfg_json = _jsonable(cfg)
    manifest = {
        "command": command,
        "tool_version": __version__,
        "config": cfg_json,
        "config_hash": hashlib.sha256(
            json.dumps(cfg_json, sort_keys=True).encode("utf-8")).hexdigest(),
        "seed": cfg["seed"],
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
        "outputs": {str(p): _sha256(p) for p in result.get("outputs", [])},
        "summary": {k: v for k, v in result.items() if k != "outputs"},
    }
    (out / f"{command}.manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return manifest


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if not args.verbose:
        logging.getLogger("httpx").setLevel(logging.WARNING)
    try:
        cfg = resolve_config(args.command, args)
        manifest = run(args.command, cfg)
    except ConfigError as exc:
        print(f"configuration error:\n{exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CorpusError, EmbeddingFormatError, JoinError, DegenerateInputError,
            ConditionError, json.JSONDecodeError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TransportError as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    print(json.dumps(manifest["summary"], sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
