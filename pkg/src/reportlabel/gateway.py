"""Client for an OpenAI-style chat-completions server exposing token logprobs.

Labels are read from the first generated token: the top-k log-probabilities
are searched for surface forms of "yes" and "no" and the pair is softmaxed
into ``p_yes``.
"""

from __future__ import annotations

import json
import logging
import math
import random
import string
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import httpx

from .conditions import ConditionSpec
from .corpus import Report, prepare_report_text
from .prompting import (
    PromptBundle,
    PromptError,
    Strategy,
    build_direct_query,
    build_summary_query,
    build_summary_request,
)

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.5


class GatewayError(Exception):
    """Base class for per-request failures."""


class TransportError(GatewayError):
    pass


class EmptySummaryError(GatewayError):
    pass


class UnscorableReportError(GatewayError):
    def __init__(self, top_logprobs: list[dict[str, Any]]):
        self.top_logprobs = top_logprobs
        toks = ", ".join(repr(t.get("token")) for t in top_logprobs)
        super().__init__(f"neither 'yes' nor 'no' among top tokens [{toks}]")


@dataclass(frozen=True)
class ClientConfig:
    endpoint: str = "http://127.0.0.1:8000"
    model_name: str = "local-model"
    temperature: float = 0.0
    max_generated_tokens: int = 256
    top_logprobs: int = 20
    max_in_flight: int = 4
    retry_limit: int = 3
    timeout: float = 60.0
    seed: int | None = 0
    backoff_base: float = 0.25

    def __post_init__(self):
        if self.top_logprobs < 2:
            raise ValueError("top_logprobs must be at least 2")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be at least 1")
        if self.retry_limit < 1:
            raise ValueError("retry_limit must be at least 1")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ClientConfig":
        fields = cls.__dataclass_fields__
        unknown = set(data) - set(fields)
        if unknown:
            raise ValueError(f"unknown client config keys: {', '.join(sorted(unknown))}")
        return cls(**data)


@dataclass(frozen=True)
class TokenScore:
    logit_yes: float
    logit_no: float
    p_yes: float
    source_token: str

    @property
    def p_no(self) -> float:
        return 1.0 - self.p_yes


def softmax_yes(logit_yes: float, logit_no: float) -> float:
    """exp(y) / (exp(y) + exp(n)), evaluated without overflow."""
    d = logit_no - logit_yes
    if d <= 0:
        return 1.0 / (1.0 + math.exp(d))
    e = math.exp(-d)
    return e / (1.0 + e)


_STRIP = string.whitespace + string.punctuation + "▁ĠĊ"


def normalize_token(token: str) -> str:
    """Lowercase and drop surrounding whitespace, punctuation and BPE markers."""
    return token.strip(_STRIP).lower()


def score_from_top_logprobs(top: Sequence[dict[str, Any]]) -> TokenScore:
    best: dict[str, tuple[float, str]] = {}
    for entry in top:
        key = normalize_token(str(entry.get("token", "")))
        if key not in ("yes", "no"):
            continue
        lp = float(entry["logprob"])
        if key not in best or lp > best[key][0]:
            best[key] = (lp, entry["token"])
    if not best:
        raise UnscorableReportError(list(top))
    # A class missing from top-k is bounded above by the smallest listed logprob;
    # we treat it as -inf, which saturates p_yes.
    ly, ty = best.get("yes", (-math.inf, ""))
    ln, tn = best.get("no", (-math.inf, ""))
    if math.isinf(ly):
        return TokenScore(ly, ln, 0.0, tn)
    if math.isinf(ln):
        return TokenScore(ly, ln, 1.0, ty)
    return TokenScore(ly, ln, softmax_yes(ly, ln), ty if ly >= ln else tn)


class InferenceClient:
    """Thread-safe client; share one instance across workers."""

    def __init__(self, cfg: ClientConfig, transport: httpx.BaseTransport | None = None):
        self.cfg = cfg
        self._http = httpx.Client(base_url=cfg.endpoint.rstrip("/"), timeout=cfg.timeout,
                                  transport=transport, trust_env=False)
        self._jitter = random.Random()

    def close(self) -> None:
        self._http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _post(self, body: dict[str, Any]) -> dict[str, Any]:
        last: Exception | None = None
        for attempt in range(self.cfg.retry_limit):
            if attempt:
                delay = self.cfg.backoff_base * 2 ** (attempt - 1)
                time.sleep(delay * (0.5 + self._jitter.random()))
            try:
                resp = self._http.post("/v1/chat/completions", json=body)
            except httpx.HTTPError as exc:
                last = exc
                logger.debug("attempt %d failed: %s", attempt + 1, exc)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = TransportError(f"server returned {resp.status_code}")
                continue
            if resp.status_code != 200:
                raise TransportError(f"server rejected request ({resp.status_code}): {resp.text}")
            try:
                return resp.json()
            except ValueError as exc:
                raise TransportError(f"response is not JSON: {exc}") from exc
        raise TransportError(
            f"request failed after {self.cfg.retry_limit} attempts: {last}"
        ) from last

    def _body(self, bundle: PromptBundle, **extra) -> dict[str, Any]:
        body = {
            "model": self.cfg.model_name,
            "messages": bundle.messages(),
            "temperature": self.cfg.temperature,
            **extra,
        }
        if self.cfg.seed is not None:
            body["seed"] = self.cfg.seed
        return body

    def generate_summary(self, bundle: PromptBundle) -> str:
        if bundle.strategy is not Strategy.SUMMARY_REQUEST:
            raise PromptError(f"expected a summary-request bundle, got {bundle.strategy.value}")
        data = self._post(self._body(bundle, max_tokens=self.cfg.max_generated_tokens))
        try:
            text = data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed completion response: {exc!r}") from exc
        text = text.strip()
        if not text:
            raise EmptySummaryError("server returned an empty summary")
        return text

    def score_yes_no(self, bundle: PromptBundle) -> TokenScore:
        if bundle.strategy not in (Strategy.DIRECT_QUERY, Strategy.SUMMARY_QUERY):
            raise PromptError(f"cannot score a {bundle.strategy.value} bundle")
        data = self._post(self._body(bundle, max_tokens=1, logprobs=True,
                                     top_logprobs=self.cfg.top_logprobs))
        try:
            top = data["choices"][0]["logprobs"]["content"][0]["top_logprobs"]
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"response carries no top_logprobs: {exc!r}") from exc
        return score_from_top_logprobs(top)


def generate_summary(bundle: PromptBundle, cfg: ClientConfig) -> str:
    with InferenceClient(cfg) as client:
        return client.generate_summary(bundle)


def score_yes_no(bundle: PromptBundle, cfg: ClientConfig) -> TokenScore:
    with InferenceClient(cfg) as client:
        return client.score_yes_no(bundle)


@dataclass(frozen=True)
class LabelRecord:
    report_id: str
    condition: str
    level: str | None
    strategy: Strategy
    p_yes: float | None
    threshold: float
    label: int | None
    summary: str | None = None
    error: str | None = None

    def with_threshold(self, threshold: float) -> "LabelRecord":
        if self.p_yes is None:
            return replace(self, threshold=threshold)
        return replace(self, threshold=threshold, label=int(self.p_yes >= threshold))


def _levels(cond: ConditionSpec) -> list[str | None]:
    return list(cond.levels) if cond.is_ivd_level else [None]


def _label_one(client: InferenceClient, report: Report, cond: ConditionSpec,
               strategy: Strategy, threshold: float) -> list[LabelRecord]:
    def err(level, exc, summary=None):
        return LabelRecord(report.id, cond.name, level, strategy, None, threshold, None,
                           summary, f"{type(exc).__name__}: {exc}")

    text = prepare_report_text(report, cond)
    summary = None
    if strategy is Strategy.SUMMARY_QUERY:
        try:
            summary = client.generate_summary(build_summary_request(cond, text))
        except (GatewayError, PromptError) as exc:
            return [err(level, exc) for level in _levels(cond)]

    out = []
    for level in _levels(cond):
        try:
            if strategy is Strategy.SUMMARY_QUERY:
                bundle = build_summary_query(cond, text, summary, level)
            else:
                bundle = build_direct_query(cond, text, level)
            score = client.score_yes_no(bundle)
        except (GatewayError, PromptError) as exc:
            out.append(err(level, exc, summary))
            continue
        out.append(LabelRecord(report.id, cond.name, level, strategy, score.p_yes,
                               threshold, int(score.p_yes >= threshold), summary))
    return out


def label_corpus(reports: Sequence[Report], cond: ConditionSpec, strategy: Strategy | str,
                 cfg: ClientConfig, threshold: float = DEFAULT_THRESHOLD,
                 client: InferenceClient | None = None) -> list[LabelRecord]:
    """Label every report (and every level, for IVD conditions).

    Requests run up to ``cfg.max_in_flight`` at a time; the result order always
    follows ``reports``. Per-report failures become records with ``error`` set.
    """
    strategy = Strategy(strategy)
    if strategy is Strategy.SUMMARY_REQUEST:
        raise ValueError("labelling needs the direct-query or summary-query strategy")
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    own = client is None
    client = client or InferenceClient(cfg)
    try:
        with ThreadPoolExecutor(max_workers=cfg.max_in_flight) as pool:
            results = pool.map(lambda r: _label_one(client, r, cond, strategy, threshold),
                               reports)
            return [rec for batch in results for rec in batch]
    finally:
        if own:
            client.close()


def summarize_corpus(reports: Sequence[Report], cond: ConditionSpec, cfg: ClientConfig,
                     client: InferenceClient | None = None) -> list[dict[str, Any]]:
    own = client is None
    client = client or InferenceClient(cfg)

    def one(report: Report) -> dict[str, Any]:
        try:
            text = prepare_report_text(report, cond)
            s = client.generate_summary(build_summary_request(cond, text))
            return {"report_id": report.id, "condition": cond.name, "summary": s, "error": None}
        except (GatewayError, PromptError) as exc:
            return {"report_id": report.id, "condition": cond.name, "summary": None,
                    "error": f"{type(exc).__name__}: {exc}"}

    try:
        with ThreadPoolExecutor(max_workers=cfg.max_in_flight) as pool:
            return list(pool.map(one, reports))
    finally:
        if own:
            client.close()


LABEL_KEYS = ("report_id", "condition", "level", "strategy", "p_yes", "threshold", "label",
              "summary", "error")


def _json_value(v: Any) -> str:
    if isinstance(v, float):
        return format(v, ".17g")
    return json.dumps(v, ensure_ascii=False)


def format_label_record(rec: LabelRecord) -> str:
    values = {
        "report_id": rec.report_id,
        "condition": rec.condition,
        "level": rec.level,
        "strategy": rec.strategy.value,
        "p_yes": rec.p_yes,
        "threshold": float(rec.threshold),
        "label": rec.label,
        "summary": rec.summary,
        "error": rec.error,
    }
    return "{" + ", ".join(f"{json.dumps(k)}: {_json_value(values[k])}" for k in LABEL_KEYS) + "}"


def write_labels(records: Iterable[LabelRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(format_label_record(rec) + "\n")


def read_labels(path: str | Path) -> list[LabelRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            d = json.loads(line)
            try:
                out.append(LabelRecord(
                    d["report_id"], d["condition"], d.get("level"), Strategy(d["strategy"]),
                    d.get("p_yes"), float(d["threshold"]), d.get("label"),
                    d.get("summary"), d.get("error"),
                ))
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{path}: line {lineno}: bad label record ({exc})") from None
    return out
