from __future__ import annotations

import logging

import pytest

from consult_rl.dialogue import ActionKind, DoctorAction, initial_state
from consult_rl.llm import (
    ChatClient,
    ChatRequest,
    ClientConfig,
    CredentialMissing,
    JudgeScore,
    LLMPatient,
    MalformedResponse,
    PatientFidelity,
    TransportError,
    UnparseableVerdict,
    chat,
    chat_with_meta,
    classify_patient_text,
    denoise_case,
    distill_reasoning,
    enhance_profile,
    find_contradictions,
    judge_patient,
    judge_similarity,
    llm_doctor_step,
    parse_fidelity_verdict,
    parse_similarity_verdict,
    rubric_rate,
)
from consult_rl.patient import REFUSAL_TEXT, REPEAT_TEXT, ReplyKind

from mock_chat import completion


def _client(server, sleeps=None, **kw):
    cfg = ClientConfig(endpoint=server.url, model="m", retries=kw.pop("retries", 3), **kw)
    return ChatClient(cfg, sleep=(sleeps.append if sleeps is not None else lambda s: None))


def test_request_validation():
    with pytest.raises(ValueError):
        ChatRequest("not a url", "m", [])
    with pytest.raises(ValueError):
        ChatRequest("http://x", "m", [], retries=-1)
    assert ChatRequest("http://x/v1/", "m", []).url == "http://x/v1/chat/completions"
    assert ChatRequest("http://x/v1/chat/completions", "m", []).url == "http://x/v1/chat/completions"


def test_missing_credential(monkeypatch):
    monkeypatch.delenv("CONSULT_RL_API_KEY", raising=False)
    with pytest.raises(CredentialMissing):
        chat(ChatRequest("http://127.0.0.1:9", "m", []))


def test_chat_success_sends_key_and_payload(chat_server, api_key):
    srv = chat_server([(200, completion("hello"))])
    res = chat_with_meta(ChatRequest(srv.url, "model-x", [{"role": "user", "content": "hi"}], temperature=0.3))
    assert res.text == "hello" and res.attempts == 1
    assert srv.requests[0]["model"] == "model-x" and srv.requests[0]["temperature"] == 0.3
    assert srv.headers[0]["Authorization"] == f"Bearer {api_key}"


def test_retry_then_success_logs_attempts(chat_server, api_key, caplog):
    srv = chat_server([(429, {"error": "slow down"}), (503, {}), (200, completion("ok"))])
    sleeps = []
    caplog.set_level(logging.INFO, logger="consult_rl.llm")
    res = chat_with_meta(ChatRequest(srv.url, "m", [], retries=3), sleep=sleeps.append, backoff_base=0.5)
    assert res.attempts == 3 and res.text == "ok"
    assert sleeps == [0.5, 1.0]
    assert "ok after 3 attempt(s)" in caplog.text


def test_retries_exhausted(chat_server, api_key):
    srv = chat_server([(500, {})] * 3)
    with pytest.raises(TransportError, match="3 attempt"):
        chat(ChatRequest(srv.url, "m", [], retries=2), sleep=lambda s: None)
    assert len(srv.requests) == 3


def test_client_error_not_retried(chat_server, api_key):
    srv = chat_server([(401, {"error": "bad key"}), (200, completion("never"))])
    with pytest.raises(TransportError, match="401"):
        chat(ChatRequest(srv.url, "m", []), sleep=lambda s: None)
    assert len(srv.requests) == 1


@pytest.mark.parametrize("body", ["not json", {"choices": []}, {"choices": [{"message": {"content": None}}]}])
def test_malformed_response(chat_server, api_key, body):
    srv = chat_server([(200, body)])
    with pytest.raises(MalformedResponse):
        chat(ChatRequest(srv.url, "m", []))


def test_connection_refused_is_transport_error(api_key):
    with pytest.raises(TransportError):
        chat(ChatRequest("http://127.0.0.1:9/v1", "m", [], retries=1, timeout=1), sleep=lambda s: None)


def test_complete_many_preserves_order(chat_server, api_key):
    srv = chat_server(responder=lambda body: (200, completion(body["messages"][0]["content"].upper())))
    client = _client(srv, max_concurrency=4)
    out = client.complete_many([[{"role": "user", "content": f"m{i}"}] for i in range(12)])
    assert [r.text for r in out] == [f"M{i}" for i in range(12)]


def test_judge_score_mapping(chat_server, api_key):
    srv = chat_server([(200, completion(f"<think>x</think><answer>{k}</answer>")) for k in range(6)])
    client = _client(srv)
    assert [judge_similarity("a", "b", client).percent for _ in range(6)] == [0, 20, 40, 60, 80, 100]
    assert "Candidate: \"a\"" in srv.requests[0]["messages"][0]["content"]


def test_judge_clamps_and_reprompts(chat_server, api_key):
    srv = chat_server([
        (200, completion("<answer>7</answer>")),
        (200, completion("I would say four")),
        (200, completion("<answer>4</answer>")),
        (200, completion("no tags")),
        (200, completion("still none")),
    ])
    client = _client(srv)
    assert judge_similarity("a", "b", client) == JudgeScore(5, 100.0)
    assert judge_similarity("a", "b", client).raw == 4
    assert len(srv.requests[2]["messages"]) == 3
    with pytest.raises(UnparseableVerdict):
        judge_similarity("a", "b", client)
    with pytest.raises(ValueError):
        judge_similarity("a", "", client)


def test_verdict_parsers():
    assert parse_similarity_verdict("<answer> Score: 3 </answer>") == 3
    assert parse_similarity_verdict("<answer>-1</answer>") == 0
    assert parse_similarity_verdict("3") is None
    v = parse_fidelity_verdict('```json\n{"information_control_rate": 0.8, "response_completeness_rate": 1,'
                               ' "factual_conflict_rate": 0.0}\n```')
    assert v == PatientFidelity(0.8, 1.0, 0.0)
    assert parse_fidelity_verdict('{"information_control_rate": 1.4, "response_completeness_rate": 1,'
                                  ' "factual_conflict_rate": 0}') is None
    assert parse_fidelity_verdict("{}") is None


def test_rubric_rate():
    assert [rubric_rate(n) for n in range(7)] == pytest.approx([1.0, 0.8, 0.6, 0.4, 0.2, 0.0, 0.0])


def test_judge_patient(chat_server, api_key, three_turn_case):
    good = '{"information_control_rate": 0.8, "response_completeness_rate": 0.6, "factual_conflict_rate": 1.0}'
    srv = chat_server([(200, completion('{"information_control_rate": 1.4}')), (200, completion(good))])
    out = judge_patient(three_turn_case, [("Any fever?", "Yes.")], _client(srv))
    assert out == PatientFidelity(0.8, 0.6, 1.0)
    prompt = srv.requests[0]["messages"][0]["content"]
    assert three_turn_case.self_report in prompt and "Doctor: Any fever?" in prompt
    with pytest.raises(ValueError):
        judge_patient(three_turn_case, [], _client(srv))


def test_llm_doctor_step_parses_grammar(chat_server, api_key, three_turn_case):
    srv = chat_server([(200, completion("<think>t</think><answer>Question: Any fever?</answer>")),
                       (200, completion("I am not sure."))])
    client = _client(srv)
    state = initial_state(three_turn_case.case_id, 4)
    a = llm_doctor_step(state, three_turn_case, client)
    assert a.kind is ActionKind.QUERY and a.question == "Any fever?"
    assert "You have 4 turn(s) remaining" in srv.requests[0]["messages"][0]["content"]
    assert llm_doctor_step(state, three_turn_case, client).kind is ActionKind.FORMAT_VIOLATION


def test_llm_patient_classification(chat_server, api_key, three_turn_case):
    srv = chat_server([
        (200, completion(f"<think>x</think><answer>{REFUSAL_TEXT}</answer>")),
        (200, completion(REPEAT_TEXT)),
        (200, completion("<answer>I have had it for two days.</answer>")),
    ])
    patient = LLMPatient(three_turn_case, _client(srv))
    kinds = [patient.reply(DoctorAction.query("q?"), ["earlier?"]).kind for _ in range(3)]
    assert kinds == [ReplyKind.REFUSAL, ReplyKind.REPEAT, ReplyKind.NORMAL]
    assert patient.reply(DoctorAction.diagnose("a", "b"), []).kind is ReplyKind.EMPTY
    assert "earlier?" in srv.requests[0]["messages"][0]["content"]
    with pytest.raises(MalformedResponse):
        classify_patient_text("<answer>  </answer>")


def test_enhance_profile_keeps_gold_fields(chat_server, api_key, three_turn_case):
    srv = chat_server([(200, completion("Patient has had a cough for two days with a low fever."))])
    out = enhance_profile(three_turn_case, _client(srv))
    assert out.case.enhanced_text.startswith("Patient has had")
    assert out.case.gold_diagnosis == three_turn_case.gold_diagnosis
    assert out.case.gold_turns == three_turn_case.gold_turns
    assert out.contradictions == []


def test_contradiction_validator():
    assert find_contradictions("I feel tired with a cough.", "The patient denies cough and is not tired.") == [
        "denies cough", "not tired"]
    assert find_contradictions("I feel tired.", "No fever reported.") == []


def test_distill_and_denoise(chat_server, api_key, three_turn_case):
    srv = chat_server([(200, completion("<think>r</think><answer>Question: q</answer>")),
                       (200, completion('{"noisy_rounds": [2]}'))])
    client = _client(srv)
    d = distill_reasoning(three_turn_case, client)
    assert d.case_id == three_turn_case.case_id and "<think>" in d.reasoning_text
    cleaned = denoise_case(three_turn_case, client)
    assert cleaned.gold_turns == (three_turn_case.gold_turns[0], three_turn_case.gold_turns[2])
    assert cleaned.gold_diagnosis == three_turn_case.gold_diagnosis
