"""Rule-based consultation evaluator: accuracy, information and compliance rewards."""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import asdict, dataclass
from typing import TYPE_CHECKING, Iterable, Sequence

from .dialogue import ActionKind, ConsultationState
from .text import tokenize

if TYPE_CHECKING:
    from .dataset import ConsultationCase

ACCURACY_SCALE = 5.0
NORMAL_ANSWER_REWARD = 1.0
REFUSAL_REWARD = -2.0
FORMAT_VIOLATION_PENALTY = -2.0
NO_DIAGNOSIS_PENALTY = -5.0


class StepEvent(str, enum.Enum):
    NORMAL_ANSWER = "NormalAnswer"
    REFUSAL = "Refusal"
    FORMAT_VIOLATION = "FormatViolation"
    NO_DIAGNOSIS_AT_LIMIT = "NoDiagnosisAtLimit"


@dataclass(frozen=True)
class RewardBreakdown:
    r_accuracy: float
    r_information: float
    r_compliance: float
    total: float

    def to_dict(self) -> dict:
        return asdict(self)


def word_f1(prediction: str, gold: str) -> float:
    """Bag-of-words F1 with clipped counts (SQuAD convention, no article removal)."""
    pred, ref = tokenize(prediction), tokenize(gold)
    if not pred or not ref:
        return float(pred == ref)
    overlap = sum((Counter(pred) & Counter(ref)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred)
    recall = overlap / len(ref)
    return 2 * precision * recall / (precision + recall)


def accuracy_reward(pred_diag: str, pred_rec: str, gold_diag: str, gold_rec: str) -> float:
    return ACCURACY_SCALE * (word_f1(pred_diag, gold_diag) + word_f1(pred_rec, gold_rec))


def information_reward(events: Iterable[StepEvent]) -> float:
    total = 0.0
    for e in events:
        if e is StepEvent.NORMAL_ANSWER:
            total += NORMAL_ANSWER_REWARD
        elif e in (StepEvent.REFUSAL, StepEvent.FORMAT_VIOLATION):
            total += REFUSAL_REWARD
    return total


def compliance_reward(events: Iterable[StepEvent]) -> float:
    total = 0.0
    for e in events:
        if e is StepEvent.FORMAT_VIOLATION:
            total += FORMAT_VIOLATION_PENALTY
        elif e is StepEvent.NO_DIAGNOSIS_AT_LIMIT:
            total += NO_DIAGNOSIS_PENALTY
    return total


def events_from_state(state: ConsultationState) -> list[StepEvent]:
    """One event per patient-answered turn, plus the limit penalty if no diagnosis was given.

    Repeat replies count as refusals.
    """
    events = []
    for turn in state.turns:
        if turn.action_kind is ActionKind.FORMAT_VIOLATION:
            events.append(StepEvent.FORMAT_VIOLATION)
        elif turn.reply_kind == "Normal":
            events.append(StepEvent.NORMAL_ANSWER)
        else:
            events.append(StepEvent.REFUSAL)
    if state.final_diagnosis is None:
        events.append(StepEvent.NO_DIAGNOSIS_AT_LIMIT)
    return events


def score_events(
    events: Sequence[StepEvent], prediction: tuple[str, str] | None, gold_diag: str, gold_rec: str
) -> RewardBreakdown:
    pred_diag, pred_rec = prediction if prediction is not None else ("", "")
    acc = accuracy_reward(pred_diag, pred_rec, gold_diag, gold_rec)
    info = information_reward(events)
    comp = compliance_reward(events)
    return RewardBreakdown(acc, info, comp, acc + info + comp)


def total_reward(state: ConsultationState, case: "ConsultationCase") -> RewardBreakdown:
    """Score a finished episode against its case. Pure; raises ValueError on a non-terminal state."""
    if not state.terminal:
        raise ValueError(f"episode {state.case_id} is not terminal")
    return score_events(
        events_from_state(state), state.final_diagnosis, case.gold_diagnosis, case.gold_recommendation
    )
