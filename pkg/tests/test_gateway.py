import json
import math

import httpx
import pytest
from hypothesis import given, strategies as st

from reportlabel.conditions import CANCER, STENOSIS_IVD
from reportlabel.corpus import Report
from reportlabel.gateway import (
    ClientConfig,
    EmptySummaryError,
    InferenceClient,
    LabelRecord,
    TransportError,
    UnscorableReportError,
    format_label_record,
    label_corpus,
    normalize_token,
    read_labels,
    score_from_top_logprobs,
    softmax_yes,
    write_labels,
)
from reportlabel.prompting import (
    PromptError,
    Strategy,
    build_direct_query,
    build_summary_request,
)


def closed_form(ly, ln):
    return math.exp(ly) / (math.exp(ly) + math.exp(ln))


class TestScoring:
    def test_worked_example(self):
        s = score_from_top_logprobs([{"token": " yes", "logprob": -0.2},
                                     {"token": " no", "logprob": -1.8}])
        assert s.p_yes == pytest.approx(closed_form(-0.2, -1.8), abs=1e-15)
        assert s.p_yes == pytest.approx(0.832, abs=5e-4)
        assert s.source_token == " yes"

    def test_equal_logits(self):
        assert score_from_top_logprobs([{"token": "yes", "logprob": -0.7},
                                        {"token": "no", "logprob": -0.7}]).p_yes == 0.5

    def test_unscorable(self):
        top = [{"token": "maybe", "logprob": -0.1}, {"token": "unclear", "logprob": -2}]
        with pytest.raises(UnscorableReportError) as info:
            score_from_top_logprobs(top)
        assert info.value.top_logprobs == top

    def test_best_variant_represents_class(self):
        top = [{"token": "Yes", "logprob": -1.0}, {"token": " yes", "logprob": -0.5},
               {"token": "NO.", "logprob": -2.0}, {"token": "no", "logprob": -3.0}]
        s = score_from_top_logprobs(top)
        assert (s.logit_yes, s.logit_no) == (-0.5, -2.0)

    def test_one_class_missing_saturates(self):
        assert score_from_top_logprobs([{"token": "yes", "logprob": -0.1}]).p_yes == 1.0
        assert score_from_top_logprobs([{"token": "▁No", "logprob": -0.1}]).p_yes == 0.0

    @pytest.mark.parametrize("tok", [" yes", "Yes", "YES!", "▁yes", "Ġyes", "\nyes."])
    def test_normalize(self, tok):
        assert normalize_token(tok) == "yes"

    @given(st.floats(-50, 50), st.floats(-50, 50), st.floats(-100, 100))
    def test_shift_invariance_and_sum(self, ly, ln, c):
        p = softmax_yes(ly, ln)
        assert p == pytest.approx(softmax_yes(ly + c, ln + c), abs=1e-12)
        assert 0.0 <= p <= 1.0
        assert abs(p + softmax_yes(ln, ly) - 1.0) <= 1e-12

    def test_extreme_logits_do_not_overflow(self):
        assert softmax_yes(0.0, -1e4) == 1.0
        assert softmax_yes(-1e4, 0.0) == 0.0


def fake_transport(handler):
    return httpx.MockTransport(handler)


def completion(content=None, top=None):
    lp = {"content": [{"token": "x", "logprob": 0.0, "top_logprobs": top}]} if top else None
    return {"choices": [{"message": {"role": "assistant", "content": content},
                         "logprobs": lp}]}


class TestClient:
    def test_request_body(self):
        seen = {}

        def handler(request):
            seen.update(json.loads(request.content))
            assert request.url.path == "/v1/chat/completions"
            return httpx.Response(200, json=completion(
                top=[{"token": "yes", "logprob": -1}, {"token": "no", "logprob": -1}]))

        cfg = ClientConfig(endpoint="http://x", model_name="llama", top_logprobs=5)
        with InferenceClient(cfg, transport=fake_transport(handler)) as c:
            c.score_yes_no(build_direct_query(CANCER, "text"))
        assert seen["model"] == "llama"
        assert seen["logprobs"] is True and seen["top_logprobs"] == 5
        assert seen["max_tokens"] == 1 and seen["temperature"] == 0.0
        assert [m["role"] for m in seen["messages"]] == ["system", "user"]

    def test_summary_is_stripped(self, client_config):
        with InferenceClient(client_config) as c:
            s = c.generate_summary(build_summary_request(CANCER, "metastasis at T4"))
        assert s == "Summary: spinal metastasis present."

    def test_summary_needs_summary_bundle(self, client_config):
        with InferenceClient(client_config) as c, pytest.raises(PromptError):
            c.generate_summary(build_direct_query(CANCER, "x"))

    def test_score_rejects_summary_bundle(self, client_config):
        with InferenceClient(client_config) as c, pytest.raises(PromptError):
            c.score_yes_no(build_summary_request(CANCER, "x"))

    def test_empty_summary(self):
        t = fake_transport(lambda r: httpx.Response(200, json=completion(content="   ")))
        with InferenceClient(ClientConfig(endpoint="http://x"), transport=t) as c:
            with pytest.raises(EmptySummaryError):
                c.generate_summary(build_summary_request(CANCER, "x"))

    def test_offline_server_retries_then_fails(self):
        calls = []

        def handler(request):
            calls.append(1)
            raise httpx.ConnectError("refused")

        cfg = ClientConfig(endpoint="http://x", retry_limit=3, backoff_base=0.001)
        with InferenceClient(cfg, transport=fake_transport(handler)) as c:
            with pytest.raises(TransportError, match="after 3 attempts"):
                c.generate_summary(build_summary_request(CANCER, "x"))
        assert len(calls) == 3

    def test_real_closed_port(self):
        cfg = ClientConfig(endpoint="http://127.0.0.1:9", retry_limit=2, backoff_base=0.001,
                           timeout=2)
        with pytest.raises(TransportError):
            InferenceClient(cfg).score_yes_no(build_direct_query(CANCER, "x"))

    def test_server_error_then_success(self):
        state = {"n": 0}

        def handler(request):
            state["n"] += 1
            if state["n"] == 1:
                return httpx.Response(503)
            return httpx.Response(200, json=completion(content="ok"))

        cfg = ClientConfig(endpoint="http://x", backoff_base=0.001)
        with InferenceClient(cfg, transport=fake_transport(handler)) as c:
            assert c.generate_summary(build_summary_request(CANCER, "x")) == "ok"

    def test_config_invariants(self):
        with pytest.raises(ValueError):
            ClientConfig(top_logprobs=1)
        with pytest.raises(ValueError):
            ClientConfig(max_in_flight=0)


def corpus(n, planted):
    reports = []
    for i in range(n):
        text = f"FINDINGS: {'lytic metastasis' if i in planted else 'normal marrow'} T{i}"
        reports.append(Report.from_text(f"r{i}", text))
    return reports


class TestLabelCorpus:
    def test_planted_reports_rank_higher(self, client_config):
        planted = {1, 4, 6, 9}
        recs = label_corpus(corpus(10, planted), CANCER, "summary-query", client_config)
        assert [r.report_id for r in recs] == [f"r{i}" for i in range(10)]
        lo = max(r.p_yes for i, r in enumerate(recs) if i not in planted)
        hi = min(r.p_yes for i, r in enumerate(recs) if i in planted)
        assert hi > lo
        assert all(r.summary for r in recs)
        assert all(r.threshold == 0.5 for r in recs)
        assert [r.label for r in recs] == [int(i in planted) for i in range(10)]

    def test_ivd_levels_multiply_records(self, client_config):
        recs = label_corpus(corpus(5, {0}), STENOSIS_IVD, Strategy.DIRECT_QUERY, client_config)
        assert len(recs) == 15
        assert [r.level for r in recs[:3]] == ["L3-L4", "L4-L5", "L5-S1"]

    def test_order_independent_of_concurrency(self, metastasis_server):
        reports = corpus(30, {2, 3, 17})
        outs = []
        for k in (1, 8):
            cfg = ClientConfig(endpoint=metastasis_server.url, max_in_flight=k)
            outs.append([format_label_record(r) for r in
                         label_corpus(reports, CANCER, "direct-query", cfg)])
        assert outs[0] == outs[1]

    def test_unscorable_becomes_error_record(self):
        def handler(request):
            return httpx.Response(200, json=completion(top=[{"token": "maybe", "logprob": 0}]))

        cfg = ClientConfig(endpoint="http://x")
        client = InferenceClient(cfg, transport=fake_transport(handler))
        recs = label_corpus(corpus(3, set()), CANCER, "direct-query", cfg, client=client)
        assert len(recs) == 3
        assert all(r.error.startswith("UnscorableReportError") and r.label is None for r in recs)

    def test_config_errors_raise(self, client_config):
        with pytest.raises(ValueError):
            label_corpus([], CANCER, "direct-query", client_config, threshold=1.5)
        with pytest.raises(ValueError):
            label_corpus([], CANCER, "summary-request", client_config)

    def test_file_round_trip(self, tmp_path):
        recs = [LabelRecord("a", "cancer", None, Strategy.SUMMARY_QUERY, 0.1 + 0.2, 0.5, 0,
                            "s", None),
                LabelRecord("b", "cancer", "L4-L5", Strategy.DIRECT_QUERY, None, 0.5, None,
                            None, "TransportError: x")]
        write_labels(recs, tmp_path / "l.jsonl")
        assert read_labels(tmp_path / "l.jsonl") == recs
        line = (tmp_path / "l.jsonl").read_text().splitlines()[0]
        assert '"p_yes": 0.30000000000000004' in line
        assert list(json.loads(line)) == ["report_id", "condition", "level", "strategy",
                                          "p_yes", "threshold", "label", "summary", "error"]

    def test_with_threshold(self):
        r = LabelRecord("a", "c", None, Strategy.DIRECT_QUERY, 0.6, 0.5, 1)
        assert r.with_threshold(0.6).label == 1
        assert r.with_threshold(0.61).label == 0
