from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from consult_rl.dialogue import (
    ActionKind,
    DoctorAction,
    TerminalStateError,
    TurnBudget,
    advance,
    initial_state,
    parse_doctor_action,
    remaining_turns_line,
    render_action_text,
    render_doctor_context,
    sample_turn_budget,
)
from consult_rl.patient import PatientReply, ReplyKind


@pytest.mark.parametrize(
    "text, kind",
    [
        ("<think>t</think><answer>Question: Do you have a fever?</answer>", ActionKind.QUERY),
        ("<think>t</think><answer>Diagnosis: flu\nRecommendation: rest</answer>", ActionKind.DIAGNOSE),
        ("<answer>Question: a?\nDiagnosis: b\nRecommendation: c</answer>", ActionKind.FORMAT_VIOLATION),
        ("<answer>Question: a? Diagnosis: b</answer>", ActionKind.FORMAT_VIOLATION),
        ("<answer>Diagnosis: flu</answer>", ActionKind.FORMAT_VIOLATION),
        ("<answer>Question:</answer>", ActionKind.FORMAT_VIOLATION),
        ("<answer>   </answer>", ActionKind.FORMAT_VIOLATION),
        ("I think you have the flu.", ActionKind.FORMAT_VIOLATION),
        ("", ActionKind.FORMAT_VIOLATION),
        ("Question: How old are you?", ActionKind.QUERY),
        ("<think>Diagnosis: maybe</think>Question: Any fever?", ActionKind.QUERY),
    ],
)
def test_parse_kinds(text, kind):
    assert parse_doctor_action(text).kind is kind


def test_parse_fields_and_think():
    a = parse_doctor_action("<think> weighing </think><answer>Diagnosis: acute gastritis \nRecommendation: antacids</answer>")
    assert (a.think, a.diagnosis, a.recommendation) == ("weighing", "acute gastritis", "antacids")
    fv = parse_doctor_action("nonsense")
    assert fv.raw == "nonsense"


@given(st.text(alphabet=st.characters(blacklist_characters="\n\r<>:", blacklist_categories=("Cs",)), min_size=1)
       .filter(lambda s: s.strip() and not any(k in s.lower() for k in ("question", "diagnosis", "recommendation"))))
def test_render_parse_roundtrip(s):
    q = parse_doctor_action(render_action_text(question=s))
    assert q.kind is ActionKind.QUERY and q.question == s.strip()
    d = parse_doctor_action(render_action_text(diagnosis=s, recommendation=s))
    assert d.kind is ActionKind.DIAGNOSE and d.diagnosis == s.strip()


@given(st.text(max_size=200))
def test_parse_never_raises(s):
    parse_doctor_action(s)


def test_budget_sampling_bounds():
    rng = np.random.default_rng(0)
    values = {sample_turn_budget(rng).value for _ in range(2000)}
    assert values == set(range(2, 11))
    assert {sample_turn_budget(rng, 4, 4).value for _ in range(20)} == {4}
    with pytest.raises(ValueError):
        sample_turn_budget(rng, 5, 3)
    with pytest.raises(ValueError):
        sample_turn_budget(rng, 0, 3)
    with pytest.raises(ValueError):
        TurnBudget(11)


def _normal(text="ok"):
    return PatientReply(ReplyKind.NORMAL, text)


def test_budget_accounting_and_terminal():
    s = initial_state("c", 3)
    assert s.budget_remaining == 3 and not s.terminal
    for remaining in (2, 1, 0):
        s = advance(s, DoctorAction.query("q?"), _normal())
        assert s.budget_remaining == remaining
    assert s.terminal and s.final_diagnosis is None
    with pytest.raises(TerminalStateError):
        advance(s, DoctorAction.query("q?"), _normal())


def test_budget_one_allows_only_diagnosis_or_one_question():
    s = initial_state("c", 1)
    done = advance(s, DoctorAction.diagnose("flu", "rest"), None)
    assert done.terminal and done.doctor_messages == 1
    asked = advance(s, DoctorAction.query("q?"), _normal())
    assert asked.terminal and asked.final_diagnosis is None


def test_advance_is_pure_and_validates_reply():
    s = initial_state("c", 4)
    s2 = advance(s, DoctorAction.query("q?"), _normal())
    assert s.turns == () and len(s2.turns) == 1
    with pytest.raises(ValueError):
        advance(s, DoctorAction.query("q?"), None)
    with pytest.raises(ValueError):
        initial_state("c", 0)


def test_format_violation_turn_records_raw_text():
    fv = parse_doctor_action("gibberish")
    s = advance(initial_state("c", 2), fv, PatientReply.refusal())
    assert s.turns[0].doctor_text == "gibberish"
    assert s.turns[0].action_kind is ActionKind.FORMAT_VIOLATION


def test_context_shows_remaining_turns(three_turn_case):
    s = initial_state(three_turn_case.case_id, 3)
    ctx = render_doctor_context(s, three_turn_case)
    assert remaining_turns_line(3) in ctx
    assert three_turn_case.self_report in ctx
    s = advance(s, DoctorAction.query("Any fever?"), _normal("Yes."))
    ctx = render_doctor_context(s, three_turn_case)
    assert remaining_turns_line(2) in ctx and "Any fever?" in ctx
    assert three_turn_case.gold_diagnosis not in ctx


def test_force_final_diagnosis_line(three_turn_case):
    s = initial_state("c", 2, force_final_diagnosis=True)
    assert "final turn" not in render_doctor_context(s, three_turn_case)
    s = advance(s, DoctorAction.query("q?"), _normal())
    assert "final turn" in render_doctor_context(s, three_turn_case)
    with pytest.raises(TerminalStateError):
        render_doctor_context(advance(s, DoctorAction.query("q2?"), _normal()), three_turn_case)
