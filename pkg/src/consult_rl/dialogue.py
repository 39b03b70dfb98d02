"""Consultation MDP: doctor action grammar, episode state, turn budgets and transitions."""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING

import numpy as np

from .text import extract_tag

if TYPE_CHECKING:
    from .dataset import ConsultationCase
    from .patient import PatientReply

DEFAULT_MIN_TURNS = 2
DEFAULT_MAX_TURNS = 10


class ActionKind(str, enum.Enum):
    QUERY = "Query"
    DIAGNOSE = "Diagnose"
    FORMAT_VIOLATION = "FormatViolation"


@dataclass(frozen=True)
class DoctorAction:
    kind: ActionKind
    think: str = ""
    question: str = ""
    diagnosis: str = ""
    recommendation: str = ""
    raw: str = ""

    @classmethod
    def query(cls, question: str, think: str = "") -> "DoctorAction":
        return cls(ActionKind.QUERY, think=think, question=question, raw=render_action_text(question=question, think=think))

    @classmethod
    def diagnose(cls, diagnosis: str, recommendation: str, think: str = "") -> "DoctorAction":
        raw = render_action_text(diagnosis=diagnosis, recommendation=recommendation, think=think)
        return cls(ActionKind.DIAGNOSE, think=think, diagnosis=diagnosis, recommendation=recommendation, raw=raw)


_PREFIX = re.compile(r"^\s*(question|diagnosis|recommendation)\s*:\s*(.*)$", re.IGNORECASE)
# An inline "Diagnosis:" after a question on the same line still counts as both kinds.
_INLINE = re.compile(r"\b(question|diagnosis|recommendation)\s*:", re.IGNORECASE)


def parse_doctor_action(text: str) -> DoctorAction:
    """Parse raw doctor output into a Query, a Diagnose, or a FormatViolation.

    Never raises: anything that does not match exactly one of the two formats is
    a FormatViolation carrying the raw text.
    """
    think = (extract_tag(text, "think") or "").strip()
    answer = extract_tag(text, "answer")
    if answer is None:
        # Untagged output is parsed as a whole, minus any think block.
        answer = re.sub(r"<think>.*?</think>", "", text, flags=re.DOTALL | re.IGNORECASE)
    violation = DoctorAction(ActionKind.FORMAT_VIOLATION, think=think, raw=text)
    if not answer.strip():
        return violation

    found: dict[str, str] = {}
    kinds_seen: set[str] = set()
    for line in answer.split("\n"):
        for m in _INLINE.finditer(line):
            kinds_seen.add(m.group(1).lower())
        m = _PREFIX.match(line)
        if not m:
            continue
        key = m.group(1).lower()
        value = m.group(2).strip()
        # A line may carry several prefixes ("Question: x Diagnosis: y"); cut at the next one.
        nxt = _INLINE.search(value)
        if nxt:
            value = value[: nxt.start()].strip()
        found.setdefault(key, value)

    has_question = "question" in kinds_seen
    has_diagnosis = "diagnosis" in kinds_seen or "recommendation" in kinds_seen
    if has_question and has_diagnosis:
        return violation
    if has_question:
        question = found.get("question", "")
        if not question:
            return violation
        return DoctorAction(ActionKind.QUERY, think=think, question=question, raw=text)
    if has_diagnosis:
        diagnosis, recommendation = found.get("diagnosis", ""), found.get("recommendation", "")
        if not diagnosis or not recommendation:
            return violation
        return DoctorAction(
            ActionKind.DIAGNOSE, think=think, diagnosis=diagnosis, recommendation=recommendation, raw=text
        )
    return violation


def render_action_text(
    question: str = "", diagnosis: str = "", recommendation: str = "", think: str = ""
) -> str:
    """Inverse of parse_doctor_action for well-formed actions."""
    if question:
        body = f"Question: {question}"
    else:
        body = f"Diagnosis: {diagnosis}\nRecommendation: {recommendation}"
    return f"<think>{think}</think><answer>{body}</answer>"


@dataclass(frozen=True)
class TurnBudget:
    value: int
    min_turns: int = DEFAULT_MIN_TURNS
    max_turns: int = DEFAULT_MAX_TURNS

    def __post_init__(self):
        if not self.min_turns <= self.value <= self.max_turns:
            raise ValueError(f"budget {self.value} outside [{self.min_turns}, {self.max_turns}]")


def sample_turn_budget(
    rng: np.random.Generator, min_turns: int = DEFAULT_MIN_TURNS, max_turns: int = DEFAULT_MAX_TURNS
) -> TurnBudget:
    if min_turns < 1:
        raise ValueError("min_turns must be >= 1")
    if min_turns > max_turns:
        raise ValueError(f"min_turns {min_turns} > max_turns {max_turns}")
    return TurnBudget(int(rng.integers(min_turns, max_turns + 1)), min_turns, max_turns)


@dataclass(frozen=True)
class Turn:
    doctor_text: str
    patient_text: str
    action_kind: ActionKind
    reply_kind: str  # PatientReply kind value; kept as text to avoid a circular import


@dataclass(frozen=True)
class ConsultationState:
    case_id: str
    budget_total: int
    turns: tuple[Turn, ...] = ()
    final_diagnosis: tuple[str, str] | None = None
    final_doctor_text: str = ""
    force_final_diagnosis: bool = False

    @property
    def budget_remaining(self) -> int:
        if self.final_diagnosis is not None:
            # The diagnose message itself uses one budget slot.
            return max(self.budget_total - len(self.turns) - 1, 0)
        return self.budget_total - len(self.turns)

    @property
    def terminal(self) -> bool:
        return self.final_diagnosis is not None or self.budget_remaining == 0

    @property
    def doctor_messages(self) -> int:
        return len(self.turns) + (1 if self.final_diagnosis is not None else 0)

    def asked_questions(self) -> list[str]:
        return [t.doctor_text for t in self.turns]


def initial_state(case_id: str, budget: int | TurnBudget, force_final_diagnosis: bool = False) -> ConsultationState:
    total = budget.value if isinstance(budget, TurnBudget) else int(budget)
    if total < 1:
        raise ValueError("turn budget must be >= 1")
    return ConsultationState(case_id=case_id, budget_total=total, force_final_diagnosis=force_final_diagnosis)


class TerminalStateError(RuntimeError):
    pass


def advance(state: ConsultationState, action: DoctorAction, reply: "PatientReply | None") -> ConsultationState:
    """Apply one doctor action and the patient's reply; returns a new state."""
    if state.terminal:
        raise TerminalStateError(f"episode {state.case_id} is already terminal")
    if action.kind is ActionKind.DIAGNOSE:
        if reply is not None and reply.text:
            raise ValueError("a Diagnose action takes no patient reply")
        return replace(
            state, final_diagnosis=(action.diagnosis, action.recommendation), final_doctor_text=action.raw
        )
    if reply is None:
        raise ValueError(f"{action.kind.value} requires a patient reply")
    doctor_text = action.question if action.kind is ActionKind.QUERY else action.raw
    turn = Turn(doctor_text=doctor_text, patient_text=reply.text, action_kind=action.kind, reply_kind=reply.kind.value)
    return replace(state, turns=state.turns + (turn,))


DOCTOR_SYSTEM_PROMPT = """\
You are an experienced doctor who needs to provide professional diagnosis and advice to patients through consultation. Please listen carefully to the patient's description, ask targeted questions, and collect sufficient information before giving a diagnosis and treatment recommendation.

Quick Guide
Objectives:
1. Obtain key information through effective questioning, each round of questions should be modified based on the previous round's content, meaning you shouldn't ask similar questions.
2. Comprehensively analyze the patient's condition to provide an accurate diagnosis and appropriate treatment recommendations.

Rules:
1. You can only choose one of the options to respond, you cannot both answer questions and provide a diagnosis simultaneously.
2. Absolutely do not repeat or ask questions similar or identical to those previously asked.

Response:
<think> [your thinking] </think>
<answer>If you believe there is insufficient information, please only ask one question, in this format:
Question: (your question).
</answer> | <answer>If you believe you have obtained enough information, please only provide diagnosis and recommendations, in this format:
Diagnosis: (the patient's most likely disease or symptoms)
Recommendation: (corresponding treatment plan or advice)
</answer>

Rewards:
Incorrect format: -2.0
Effective question (patient can provide an answer and the question is helpful for diagnosis): +1.0
Ineffective questions do not count towards score
Repeated questions: -2.0
The number of conversation turn is limited. Reaching maximum interaction rounds without providing a diagnosis: -5.0
Completely correct diagnosis and recommendations: +10.0"""


def remaining_turns_line(remaining: int) -> str:
    return f"You have {remaining} turn(s) remaining in this consultation."


def render_doctor_context(state: ConsultationState, case: "ConsultationCase") -> str:
    if state.terminal:
        raise TerminalStateError("cannot render context for a terminal state")
    parts = [DOCTOR_SYSTEM_PROMPT, "", f"Patient self-report: {case.self_report}"]
    if state.turns:
        parts.append("")
        parts.append("Dialogue history:")
        for i, t in enumerate(state.turns, start=1):
            parts.append(f"Round {i} doctor: {t.doctor_text}")
            parts.append(f"Round {i} patient: {t.patient_text}")
    parts.append("")
    parts.append(remaining_turns_line(state.budget_remaining))
    if state.force_final_diagnosis and state.budget_remaining == 1:
        parts.append("This is the final turn: you must now provide your Diagnosis and Recommendation.")
    return "\n".join(parts)
