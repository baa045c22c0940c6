"""Deterministic stand-in for a chat-completions inference server.

Responses are driven by a keyword rule table and depend only on the request
body, which makes offline end-to-end runs reproducible byte for byte.

Rule table file (JSON or YAML)::

    {
      "rules": [
        {"keyword": "metastasis", "logit_yes": 0.0, "logit_no": -4.0,
         "canned_summary": "Findings consistent with spinal metastasis."}
      ],
      "default_logits": [-2.0, 0.0],
      "default_summary": "No relevant abnormality described."
    }

The first rule whose keyword occurs (case-insensitively) in the final user
message wins. Requests whose final user message carries the yes/no answer
instruction get a one-token reply with ``yes``/``no`` log-probabilities;
all other requests get the matching canned summary.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any

from .conditions import read_structured
from .prompting import ANSWER_INSTRUCTION

logger = logging.getLogger(__name__)

COMPLETIONS_PATH = "/v1/chat/completions"


@dataclass(frozen=True)
class Rule:
    keyword: str
    logit_yes: float
    logit_no: float
    canned_summary: str = ""


@dataclass(frozen=True)
class RuleTable:
    rules: tuple[Rule, ...] = ()
    default_logits: tuple[float, float] = (-2.0, 0.0)
    default_summary: str = "No relevant abnormality described."
    _lowered: tuple[str, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "rules", tuple(self.rules))
        object.__setattr__(self, "default_logits", tuple(float(x) for x in self.default_logits))
        keys = [r.keyword.lower() for r in self.rules]
        if any(not k.strip() for k in keys):
            raise ValueError("rule keywords must be non-empty")
        if len(set(keys)) != len(keys):
            raise ValueError("rule keywords must be unique (case-insensitive)")
        object.__setattr__(self, "_lowered", tuple(keys))

    def match(self, text: str) -> Rule | None:
        low = text.lower()
        for key, rule in zip(self._lowered, self.rules):
            if key in low:
                return rule
        return None

    def to_dict(self) -> dict[str, Any]:
        return {
            "rules": [
                {"keyword": r.keyword, "logit_yes": r.logit_yes, "logit_no": r.logit_no,
                 "canned_summary": r.canned_summary}
                for r in self.rules
            ],
            "default_logits": list(self.default_logits),
            "default_summary": self.default_summary,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RuleTable":
        rules = tuple(
            Rule(r["keyword"], float(r["logit_yes"]), float(r["logit_no"]),
                 r.get("canned_summary", ""))
            for r in data.get("rules", [])
        )
        kw = {}
        if "default_logits" in data:
            kw["default_logits"] = tuple(data["default_logits"])
        if "default_summary" in data:
            kw["default_summary"] = data["default_summary"]
        return cls(rules, **kw)

    @classmethod
    def load(cls, path: str | Path) -> "RuleTable":
        return cls.from_dict(read_structured(path))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


class BadRequest(ValueError):
    pass


def _final_user_message(body: Any) -> str:
    if not isinstance(body, dict):
        raise BadRequest("request body must be a JSON object")
    messages = body.get("messages")
    if not isinstance(messages, list) or not messages:
        raise BadRequest("'messages' must be a non-empty list")
    for m in messages:
        if not isinstance(m, dict) or not isinstance(m.get("role"), str) \
                or not isinstance(m.get("content"), str):
            raise BadRequest("each message needs string 'role' and 'content'")
    users = [m["content"] for m in messages if m["role"] == "user"]
    if not users:
        raise BadRequest("no user message")
    return users[-1]


def respond(table: RuleTable, body: Any) -> dict[str, Any]:
    """Build the response object for a parsed request body."""
    text = _final_user_message(body)
    rule = table.match(text)
    model = body.get("model", "mock")
    digest = hashlib.sha256(
        json.dumps(body, sort_keys=True, ensure_ascii=False).encode("utf-8")
    ).hexdigest()[:24]

    if ANSWER_INSTRUCTION in text:
        ly, ln = (rule.logit_yes, rule.logit_no) if rule else table.default_logits
        answer = "yes" if ly >= ln else "no"
        top = [{"token": "yes", "logprob": ly}, {"token": "no", "logprob": ln}]
        top.sort(key=lambda t: -t["logprob"])
        content = answer
        logprobs = {"content": [{"token": answer, "logprob": max(ly, ln),
                                 "top_logprobs": top}]}
    else:
        content = rule.canned_summary if rule and rule.canned_summary else table.default_summary
        logprobs = None

    return {
        "id": f"mock-{digest}",
        "object": "chat.completion",
        "model": model,
        "choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": content},
            "logprobs": logprobs,
            "finish_reason": "stop",
        }],
    }


def _encode(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False).encode("utf-8")


class _Handler(BaseHTTPRequestHandler):
    server: "MockServer"
    protocol_version = "HTTP/1.1"

    def _send(self, status: int, payload: Any) -> None:
        data = _encode(payload)
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_POST(self):  # noqa: N802
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length)
        if self.path.rstrip("/") != COMPLETIONS_PATH:
            self._send(404, {"error": {"message": f"unknown path {self.path}"}})
            return
        try:
            body = json.loads(raw.decode("utf-8"))
            payload = respond(self.server.rule_table, body)
        except (UnicodeDecodeError, json.JSONDecodeError, BadRequest) as exc:
            self._send(400, {"error": {"message": str(exc), "type": "invalid_request"}})
            return
        self._send(200, payload)

    def log_message(self, format, *args):  # noqa: A002
        logger.debug("mock-server: " + format, *args)


class MockServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, rule_table: RuleTable, host: str = "127.0.0.1", port: int = 0):
        self.rule_table = rule_table
        super().__init__((host, port), _Handler)
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "MockServer":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def close(self) -> None:
        if self._thread is not None:
            self.shutdown()
            self._thread.join()
            self._thread = None
        self.server_close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def serve(rule_table: RuleTable, port: int = 0, host: str = "127.0.0.1") -> MockServer:
    """Start a mock server on a background thread. ``port=0`` picks a free port."""
    return MockServer(rule_table, host, port).start()
