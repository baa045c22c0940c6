"""Report corpora: loading, section segmentation and preprocessing.

Section offsets are UTF-8 *byte* offsets into the report text so that mask
files written for summary fine-tuning are exact regardless of how a consumer
counts characters.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

from .conditions import ConditionSpec

SUMMARY_KEYWORDS = ("conclusion", "impression", "findings", "summary")
HISTORY_KEYWORDS = (
    "clinical history",
    "clinical details",
    "clinical indication",
    "history",
    "indication",
)

REQUIRED_KEYS = ("id", "patient_id", "study_id", "text")


class SectionKind(str, enum.Enum):
    SUMMARY = "summary"
    CLINICAL_HISTORY = "clinical_history"
    BODY = "body"


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class SectionSpan:
    """A contiguous section of a report, ``[start, end)`` in bytes.

    ``content_start``/``content_end`` delimit the section body with the header,
    its separator and surrounding whitespace removed.
    """

    kind: SectionKind
    header_text: str
    start: int
    end: int
    content_start: int
    content_end: int


@dataclass(frozen=True)
class Report:
    id: str
    patient_id: str
    study_id: str
    raw_text: str
    sections: tuple[SectionSpan, ...] = ()
    metadata: dict[str, Any] = field(default_factory=dict, compare=False)

    @property
    def raw_bytes(self) -> bytes:
        return self.raw_text.encode("utf-8")

    def span_text(self, span: SectionSpan) -> str:
        return self.raw_bytes[span.start:span.end].decode("utf-8")

    def span_content(self, span: SectionSpan) -> str:
        return self.raw_bytes[span.content_start:span.content_end].decode("utf-8")

    def sections_of(self, kind: SectionKind) -> list[SectionSpan]:
        return [s for s in self.sections if s.kind is kind]

    @classmethod
    def from_text(cls, id: str, text: str, patient_id: str = "", study_id: str = "",
                  **segment_kwargs) -> "Report":
        return cls(id, patient_id, study_id or id, text,
                   tuple(segment_sections(text, **segment_kwargs)))


def _header_pattern(keywords: Iterable[str]) -> re.Pattern[bytes]:
    # Longest first so "clinical history" wins over "history".
    alts = sorted({k.strip().lower() for k in keywords if k.strip()}, key=len, reverse=True)
    words = [rb"[ \t]+".join(re.escape(w.encode()) for w in kw.split()) for kw in alts]
    return re.compile(
        rb"^[ \t]*(?P<kw>" + rb"|".join(words) + rb")[ \t]*(?P<sep>[:\-]|(?=\r?$))",
        re.IGNORECASE | re.MULTILINE,
    )


_WS = b" \t\r\n\f\v"


def _content_bounds(data: bytes, begin: int, end: int) -> tuple[int, int]:
    while begin < end and data[begin] in _WS:
        begin += 1
    while end > begin and data[end - 1] in _WS:
        end -= 1
    return begin, end


def segment_sections(
    raw_text: str,
    summary_keywords: Sequence[str] = SUMMARY_KEYWORDS,
    history_keywords: Sequence[str] = HISTORY_KEYWORDS,
) -> list[SectionSpan]:
    """Split a report into sections at recognised header lines.

    A header is a keyword at the start of a line followed by ``:``, ``-`` or the
    end of the line; matching is case-insensitive. Each section runs until the
    next header. Text before the first header becomes a single body section, so
    the spans always tile the whole text.
    """
    data = raw_text.encode("utf-8")
    if not data:
        return []
    summary = {k.lower() for k in summary_keywords}
    kinds = {**{k.lower(): SectionKind.CLINICAL_HISTORY for k in history_keywords},
             **{k.lower(): SectionKind.SUMMARY for k in summary}}
    headers = []
    for m in _header_pattern(kinds).finditer(data):
        kw = b" ".join(m.group("kw").split()).decode().lower()
        headers.append((m.start(), m.end(), kinds[kw], m.group("kw").decode()))

    spans = []
    first = headers[0][0] if headers else len(data)
    if first > 0:
        cs, ce = _content_bounds(data, 0, first)
        spans.append(SectionSpan(SectionKind.BODY, "", 0, first, cs, ce))
    for i, (start, header_end, kind, header) in enumerate(headers):
        end = headers[i + 1][0] if i + 1 < len(headers) else len(data)
        cs, ce = _content_bounds(data, header_end, end)
        spans.append(SectionSpan(kind, header, start, end, cs, ce))
    return spans


def _parse_line(line: str, lineno: int) -> dict[str, Any]:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise CorpusError(f"line {lineno}: malformed record ({exc.msg})") from None
    if not isinstance(rec, dict):
        raise CorpusError(f"line {lineno}: record is not an object")
    missing = [k for k in REQUIRED_KEYS if k not in rec]
    if missing:
        raise CorpusError(f"line {lineno}: missing keys {', '.join(missing)}")
    bad = [k for k in REQUIRED_KEYS if not isinstance(rec[k], str)]
    if bad:
        raise CorpusError(f"line {lineno}: keys {', '.join(bad)} must be strings")
    if not rec["id"]:
        raise CorpusError(f"line {lineno}: empty id")
    return rec


def load_corpus(path: str | Path, **segment_kwargs) -> list[Report]:
    """Read a JSON-lines corpus, segmenting every report.

    Blank lines are ignored. Keys other than the required ones are kept on
    ``Report.metadata``.
    """
    reports: list[Report] = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = _parse_line(line, lineno)
            rid = rec["id"]
            if rid in seen:
                raise CorpusError(
                    f"line {lineno}: duplicate id {rid!r} (first seen on line {seen[rid]})"
                )
            seen[rid] = lineno
            text = rec["text"]
            reports.append(Report(
                id=rid,
                patient_id=rec["patient_id"],
                study_id=rec["study_id"],
                raw_text=text,
                sections=tuple(segment_sections(text, **segment_kwargs)),
                metadata={k: v for k, v in rec.items() if k not in REQUIRED_KEYS},
            ))
    return reports


def write_corpus(reports: Iterable[Report], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in reports:
            rec = {"id": r.id, "patient_id": r.patient_id, "study_id": r.study_id,
                   "text": r.raw_text, **r.metadata}
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def prepare_report_text(report: Report, cond: ConditionSpec) -> str:
    """Return the text to show the model for ``cond``.

    Clinical-history sections are dropped when the condition asks for it; the
    remaining sections are stripped and joined with newlines. Otherwise the
    raw text is returned untouched.
    """
    if not cond.exclude_clinical_history:
        return report.raw_text
    history = report.sections_of(SectionKind.CLINICAL_HISTORY)
    if not history:
        return report.raw_text
    kept = [report.span_text(s).strip() for s in report.sections
            if s.kind is not SectionKind.CLINICAL_HISTORY]
    return "\n".join(k for k in kept if k)


def finetune_record(report: Report) -> dict[str, Any] | None:
    """Mask record for the first non-empty summary section, or None."""
    for span in report.sections_of(SectionKind.SUMMARY):
        if span.content_end > span.content_start:
            return {
                "report_id": report.id,
                "text": report.raw_text,
                "mask_begin": span.content_start,
                "mask_end": span.content_end,
            }
    return None


def prep_finetune_dataset(corpus: Sequence[Report], out: str | Path) -> dict[str, int]:
    """Write summary-masked fine-tuning records, one JSON object per line.

    Reports without a summary section are skipped. Returns the counts of
    written and skipped reports.
    """
    written = skipped = 0
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        for report in corpus:
            rec = finetune_record(report)
            if rec is None:
                skipped += 1
                continue
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
            written += 1
    return {"written": written, "skipped": skipped}


def read_finetune_records(path: str | Path) -> list[dict[str, Any]]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def mask_text(record: dict[str, Any]) -> str:
    """Decode the masked region of a fine-tune record."""
    data = record["text"].encode("utf-8")
    return data[record["mask_begin"]:record["mask_end"]].decode("utf-8")
