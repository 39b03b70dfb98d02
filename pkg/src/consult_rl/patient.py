"""Deterministic scripted patient: hidden fact profile plus keyword-overlap answering."""

from __future__ import annotations

import copy
import enum
import re
from dataclasses import dataclass, field
from typing import Sequence

from .dataset import ConsultationCase
from .dialogue import ActionKind, DoctorAction
from .text import content_words, jaccard, split_clauses

REFUSAL_TEXT = "Sorry, I cannot answer this question."
REPEAT_TEXT = "Sorry, you've already asked this question."

DEFAULT_MATCH_JACCARD = 0.3
DEFAULT_MATCH_MIN_OVERLAP = 1
DEFAULT_REPEAT_THRESHOLD = 0.8


class ReplyKind(str, enum.Enum):
    NORMAL = "Normal"
    REFUSAL = "Refusal"
    REPEAT = "Repeat"
    EMPTY = "Empty"


@dataclass(frozen=True)
class PatientReply:
    kind: ReplyKind
    text: str

    @classmethod
    def refusal(cls) -> "PatientReply":
        return cls(ReplyKind.REFUSAL, REFUSAL_TEXT)

    @classmethod
    def repeat(cls) -> "PatientReply":
        return cls(ReplyKind.REPEAT, REPEAT_TEXT)

    @classmethod
    def empty(cls) -> "PatientReply":
        return cls(ReplyKind.EMPTY, "")


@dataclass
class Fact:
    topic_keys: frozenset[str]
    text: str
    revealed: bool = False


@dataclass
class PatientProfile:
    case_id: str
    self_report: str
    facts: list[Fact]
    gold_diagnosis: str = field(repr=False)
    gold_recommendation: str = field(repr=False)

    def fresh_copy(self) -> "PatientProfile":
        clone = copy.deepcopy(self)
        for f in clone.facts:
            f.revealed = False
        return clone


def classify_reply_text(text: str) -> PatientReply:
    """Reply kind of free text from a human or LLM patient.

    Only the two protocol sentences, matched exactly after trimming whitespace and
    quotes, count as Refusal or Repeat; anything else is a Normal answer.
    """
    body = text.strip().strip('"').strip()
    if body == REFUSAL_TEXT:
        return PatientReply.refusal()
    if body == REPEAT_TEXT:
        return PatientReply.repeat()
    return PatientReply(ReplyKind.NORMAL, body)

def build_profile(case: ConsultationCase) -> PatientProfile:
    """One fact per gold patient answer, keyed by the doctor question it answered,
    then one fact per self-report clause keyed by its own content words.

    Statements that mention the gold diagnosis or recommendation are left out so
    the simulator cannot leak labels.
    """
    if not case.self_report.strip():
        raise ValueError(f"case {case.case_id} has no self-report")
    hidden = [
        re.compile(rf"\b{re.escape(s.strip().lower())}\b")
        for s in (case.gold_diagnosis, case.gold_recommendation)
        if s.strip()
    ]

    def leaks(text: str) -> bool:
        low = text.lower()
        return any(h.search(low) for h in hidden)

    facts = []
    for turn in case.gold_turns:
        keys = content_words(turn.doctor_question) or content_words(turn.patient_answer)
        if keys and not leaks(turn.patient_answer):
            facts.append(Fact(keys, turn.patient_answer.strip()))
    for clause in split_clauses(case.self_report):
        text = clause if clause[-1] in ".!?" else clause + "."
        if not leaks(text):
            facts.append(Fact(content_words(clause), text[0].upper() + text[1:]))
    return PatientProfile(
        case_id=case.case_id,
        self_report=case.self_report,
        facts=facts,
        gold_diagnosis=case.gold_diagnosis,
        gold_recommendation=case.gold_recommendation,
    )


def detect_repeat(question: str, history: Sequence[str], threshold: float = DEFAULT_REPEAT_THRESHOLD) -> bool:
    words = content_words(question)
    return any(jaccard(words, content_words(h)) >= threshold for h in history)


def best_fact(
    profile: PatientProfile,
    question: str,
    min_jaccard: float = DEFAULT_MATCH_JACCARD,
    min_overlap: int = DEFAULT_MATCH_MIN_OVERLAP,
) -> int | None:
    words = content_words(question)
    best, best_score = None, -1.0
    for i, fact in enumerate(profile.facts):
        overlap = len(words & fact.topic_keys)
        if overlap < min_overlap:
            continue
        score = jaccard(words, fact.topic_keys)
        # Strict ">" keeps the lowest index on ties.
        if score >= min_jaccard and score > best_score:
            best, best_score = i, score
    return best


@dataclass
class ScriptedPatient:
    """Patient agent backed by a hidden profile. Each episode needs its own instance."""

    profile: PatientProfile
    match_jaccard: float = DEFAULT_MATCH_JACCARD
    match_min_overlap: int = DEFAULT_MATCH_MIN_OVERLAP
    repeat_threshold: float = DEFAULT_REPEAT_THRESHOLD

    def reply(self, action: DoctorAction, history: Sequence[str]) -> PatientReply:
        if action.kind is ActionKind.DIAGNOSE:
            return PatientReply.empty()
        if action.kind is ActionKind.FORMAT_VIOLATION:
            return PatientReply.refusal()
        return respond(
            self.profile,
            action.question,
            history,
            match_jaccard=self.match_jaccard,
            match_min_overlap=self.match_min_overlap,
            repeat_threshold=self.repeat_threshold,
        )


def respond(
    profile: PatientProfile,
    question: str,
    history: Sequence[str],
    *,
    is_format_violation: bool = False,
    match_jaccard: float = DEFAULT_MATCH_JACCARD,
    match_min_overlap: int = DEFAULT_MATCH_MIN_OVERLAP,
    repeat_threshold: float = DEFAULT_REPEAT_THRESHOLD,
) -> PatientReply:
    """Answer one doctor question: Repeat, then best matching fact, else Refusal.

    The reply depends only on (profile facts, question, history). Matching a fact
    sets its ``revealed`` flag.
    """
    if is_format_violation:
        return PatientReply.refusal()
    if detect_repeat(question, history, repeat_threshold):
        return PatientReply.repeat()
    idx = best_fact(profile, question, match_jaccard, match_min_overlap)
    if idx is None:
        return PatientReply.refusal()
    fact = profile.facts[idx]
    fact.revealed = True
    return PatientReply(ReplyKind.NORMAL, fact.text)
