"""Prompt construction for direct-query and summary-then-query labelling.

The wording lives in ``data/templates.json`` so runs can pin a template
version. The condition definition goes in the system turn; the report, any
generated summary and the yes/no question go in the user turn.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any

from .conditions import ConditionSpec


class Strategy(str, enum.Enum):
    DIRECT_QUERY = "direct-query"
    SUMMARY_REQUEST = "summary-request"
    SUMMARY_QUERY = "summary-query"


class PromptError(ValueError):
    pass


@lru_cache(maxsize=None)
def _default_templates() -> tuple[tuple[str, Any], ...]:
    text = resources.files("reportlabel").joinpath("data/templates.json").read_text("utf-8")
    return tuple(json.loads(text).items())


def load_templates(path: str | Path | None = None) -> dict[str, Any]:
    if path is None:
        return dict(_default_templates())
    return json.loads(Path(path).read_text(encoding="utf-8"))


ANSWER_INSTRUCTION: str = load_templates()["answer_instruction"]


@dataclass(frozen=True)
class PromptBundle:
    strategy: Strategy
    system_text: str
    user_text: str
    condition_name: str
    level: str | None = None

    def messages(self) -> list[dict[str, str]]:
        return [
            {"role": "system", "content": self.system_text},
            {"role": "user", "content": self.user_text},
        ]


def _check_level(cond: ConditionSpec, level: str | None) -> None:
    if level is None:
        if cond.is_ivd_level:
            raise PromptError(f"condition {cond.name!r} is IVD-level; a level is required")
        return
    if not cond.is_ivd_level:
        raise PromptError(f"condition {cond.name!r} is scan-level; got level {level!r}")
    if level not in cond.levels:
        raise PromptError(f"level {level!r} is not configured for {cond.name!r}")


def _fields(cond, report_text, level, t):
    if not report_text or not report_text.strip():
        raise PromptError("report text is empty")
    return {
        "definition": cond.definition.strip(),
        "condition": cond.name,
        "report": report_text,
        "answer_instruction": t["answer_instruction"],
        "level_clause": t["level_clause"].format(level=level) if level else "",
    }


def build_direct_query(cond: ConditionSpec, report_text: str, level: str | None = None,
                       templates: dict[str, Any] | None = None) -> PromptBundle:
    t = templates or load_templates()
    _check_level(cond, level)
    f = _fields(cond, report_text, level, t)
    return PromptBundle(Strategy.DIRECT_QUERY, t["system"].format(**f),
                        t["direct_query"].format(**f), cond.name, level)


def build_summary_request(cond: ConditionSpec, report_text: str,
                          templates: dict[str, Any] | None = None) -> PromptBundle:
    """Ask for a summary of the report focused on ``cond`` (no question)."""
    t = templates or load_templates()
    f = _fields(cond, report_text, None, t)
    return PromptBundle(Strategy.SUMMARY_REQUEST, t["summary_system"].format(**f),
                        t["summary_request"].format(**f), cond.name, None)


def build_summary_query(cond: ConditionSpec, report_text: str, summary: str,
                        level: str | None = None,
                        templates: dict[str, Any] | None = None) -> PromptBundle:
    t = templates or load_templates()
    if not summary or not summary.strip():
        raise PromptError("summary is empty")
    _check_level(cond, level)
    f = _fields(cond, report_text, level, t)
    f["summary"] = summary.strip()
    return PromptBundle(Strategy.SUMMARY_QUERY, t["system"].format(**f),
                        t["summary_query"].format(**f), cond.name, level)
