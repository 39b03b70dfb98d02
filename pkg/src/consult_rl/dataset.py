"""Consultation corpus schema, JSONL I/O, cleaning filters, splits and statistics."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CATEGORIES = (
    "Digestive System Diseases",
    "Respiratory System Diseases",
    "Infectious Diseases",
    "Genitourinary System Diseases",
    "Neurological Disorders",
    "Circulatory System Diseases",
    "Endocrine Disorders",
    "Skin Diseases",
)
SYNTHETIC_CATEGORY = "synthetic"
SPLITS = ("train", "test")

# Field order is part of the on-disk format; round-trips rely on it.
FIELDS = (
    "case_id",
    "self_report",
    "gold_turns",
    "gold_diagnosis",
    "gold_recommendation",
    "disease_category",
    "split",
)


class SchemaError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class DuplicateIdError(SchemaError):
    pass


@dataclass(frozen=True)
class GoldTurn:
    doctor_question: str
    patient_answer: str


@dataclass(frozen=True)
class ConsultationCase:
    case_id: str
    self_report: str
    gold_turns: tuple[GoldTurn, ...]
    gold_diagnosis: str
    gold_recommendation: str
    disease_category: str = SYNTHETIC_CATEGORY
    split: str = "train"
    enhanced_text: str | None = None

    def validate(self, line: int | None = None) -> None:
        if not str(self.case_id).strip():
            raise SchemaError("case_id is empty", line)
        if not self.self_report.strip():
            raise SchemaError(f"{self.case_id}: self_report is empty", line)
        if not self.gold_diagnosis.strip():
            raise SchemaError(f"{self.case_id}: gold_diagnosis is empty", line)
        if self.disease_category not in CATEGORIES and self.disease_category != SYNTHETIC_CATEGORY:
            raise SchemaError(f"{self.case_id}: unknown disease_category {self.disease_category!r}", line)
        if self.split not in SPLITS:
            raise SchemaError(f"{self.case_id}: split must be one of {SPLITS}, got {self.split!r}", line)
        for i, turn in enumerate(self.gold_turns):
            if not turn.doctor_question.strip() or not turn.patient_answer.strip():
                raise SchemaError(f"{self.case_id}: gold turn {i} has an empty side", line)

    def to_record(self) -> dict:
        record = {
            "case_id": self.case_id,
            "self_report": self.self_report,
            "gold_turns": [
                {"doctor_question": t.doctor_question, "patient_answer": t.patient_answer}
                for t in self.gold_turns
            ],
            "gold_diagnosis": self.gold_diagnosis,
            "gold_recommendation": self.gold_recommendation,
            "disease_category": self.disease_category,
            "split": self.split,
        }
        if self.enhanced_text is not None:
            record["enhanced_text"] = self.enhanced_text
        return record

    @classmethod
    def from_record(cls, record: dict, line: int | None = None) -> "ConsultationCase":
        if not isinstance(record, dict):
            raise SchemaError("record is not an object", line)
        for name in FIELDS:
            if name not in record:
                raise SchemaError(f"missing field {name!r}", line)
        for name in FIELDS:
            if name != "gold_turns" and not isinstance(record[name], str):
                raise SchemaError(f"field {name!r} must be a string", line)
        turns = record["gold_turns"]
        if not isinstance(turns, list):
            raise SchemaError("gold_turns must be a list", line)
        parsed = []
        for t in turns:
            if not isinstance(t, dict) or "doctor_question" not in t or "patient_answer" not in t:
                raise SchemaError("gold turn must have doctor_question and patient_answer", line)
            parsed.append(GoldTurn(str(t["doctor_question"]), str(t["patient_answer"])))
        case = cls(
            case_id=record["case_id"],
            self_report=record["self_report"],
            gold_turns=tuple(parsed),
            gold_diagnosis=record["gold_diagnosis"],
            gold_recommendation=record["gold_recommendation"],
            disease_category=record["disease_category"],
            split=record["split"],
            enhanced_text=record.get("enhanced_text"),
        )
        case.validate(line)
        return case


def dumps_case(case: ConsultationCase) -> str:
    return json.dumps(case.to_record(), ensure_ascii=False)


def load_corpus(path: str | Path) -> list[ConsultationCase]:
    """Read a JSONL corpus, validating every record.

    Raises SchemaError (with the 1-based line number), DuplicateIdError, or OSError.
    """
    cases: list[ConsultationCase] = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                record = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON: {exc.msg}", lineno) from exc
            case = ConsultationCase.from_record(record, lineno)
            if case.case_id in seen:
                raise DuplicateIdError(
                    f"case_id {case.case_id!r} already defined on line {seen[case.case_id]}", lineno
                )
            seen[case.case_id] = lineno
            cases.append(case)
    return cases


def save_corpus(cases: Iterable[ConsultationCase], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for case in cases:
            fh.write(dumps_case(case) + "\n")


def clean_corpus(
    cases: Sequence[ConsultationCase], min_turns: int = 3
) -> tuple[list[ConsultationCase], list[ConsultationCase]]:
    """Drop shallow dialogues: cases with fewer than ``min_turns`` gold (question, answer) pairs."""
    kept, dropped = [], []
    for case in cases:
        (kept if len(case.gold_turns) >= min_turns else dropped).append(case)
    return kept, dropped


def sample_eval_subset(
    cases: Sequence[ConsultationCase], n: int = 500, seed: int = 0
) -> list[ConsultationCase]:
    """Uniform sample without replacement from the test split, kept in corpus order."""
    test = [c for c in cases if c.split == "test"]
    if n > len(test):
        raise ValueError(f"requested {n} cases but only {len(test)} test cases are available")
    if n < 0:
        raise ValueError("n must be non-negative")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(len(test), size=n, replace=False))
    return [test[i] for i in chosen]


@dataclass
class CorpusStats:
    total: int
    per_split: dict[str, int]
    per_category: dict[str, int]
    turn_histogram: dict[int, int]
    per_split_category: dict[str, dict[str, int]] = field(default_factory=dict)

    def render(self) -> str:
        lines = [f"total cases: {self.total}"]
        lines.append("per split:")
        lines += [f"  {k}: {v}" for k, v in sorted(self.per_split.items())]
        lines.append("per disease category:")
        lines += [f"  {k}: {v}" for k, v in sorted(self.per_category.items())]
        lines.append("gold turns histogram:")
        lines += [f"  {k}: {v}" for k, v in sorted(self.turn_histogram.items())]
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "per_split": dict(sorted(self.per_split.items())),
            "per_category": dict(sorted(self.per_category.items())),
            "turn_histogram": {str(k): v for k, v in sorted(self.turn_histogram.items())},
        }


def corpus_stats(cases: Sequence[ConsultationCase]) -> CorpusStats:
    per_split_category: dict[str, dict[str, int]] = {}
    for c in cases:
        bucket = per_split_category.setdefault(c.split, {})
        bucket[c.disease_category] = bucket.get(c.disease_category, 0) + 1
    return CorpusStats(
        total=len(cases),
        per_split=dict(Counter(c.split for c in cases)),
        per_category=dict(Counter(c.disease_category for c in cases)),
        turn_histogram=dict(Counter(len(c.gold_turns) for c in cases)),
        per_split_category=per_split_category,
    )


# ---------------------------------------------------------------------------
# Synthetic fixtures
#
# Each disease owns a fixed set of answerable topics; every other topic draws a
# refusal. The pattern of answered topics identifies the disease, and diagnosis
# strings share no words so a wrong guess scores zero. Self-reports avoid topic
# words so they never answer a topic question by accident. Question wording is
# shared with the toy policy's vocabulary.

TOPIC_QUESTIONS = {
    "duration": "How long have you had these symptoms?",
    "fever": "Do you have a fever?",
    "cough": "Do you have a cough?",
    "pain": "Where exactly is the pain located?",
}

_DURATIONS = ("About two days.", "Around one week.", "Since yesterday morning.", "Roughly three days now.",
              "Nearly five days.")

_DISEASES = (
    {
        "diagnosis": "bronchitis",
        "recommendation": "cough suppressants and warm fluids",
        "category": "Respiratory System Diseases",
        "self_reports": (
            "I feel tired and my chest sounds rattly.",
            "I have been wheezing at night.",
            "My throat is scratchy and I feel run down.",
            "I get winded climbing stairs.",
        ),
        "answers": {
            "fever": ("I had a low fever two days ago.", "My temperature reached 38 degrees.",
                      "I have felt hot and sweaty at night.", "There was a slight fever at the start."),
            "cough": ("I cough up yellow phlegm every morning.", "The cough is dry and worse at night.",
                      "I cough constantly with some mucus.", "My cough keeps me awake."),
        },
    },
    {
        "diagnosis": "gastroenteritis",
        "recommendation": "oral rehydration salts",
        "category": "Digestive System Diseases",
        "self_reports": (
            "I have had diarrhea and nausea since eating out.",
            "My stomach has been upset with loose stools.",
            "I keep vomiting after meals.",
            "I have watery stools several times a day.",
        ),
        "answers": {
            "fever": ("I have a mild fever of 37.8 degrees.", "I felt feverish last night.",
                      "My temperature was slightly high this morning.", "I had chills with a low fever."),
            "pain": ("The cramping is around my belly button.", "It hurts in my lower abdomen.",
                     "The ache spreads across my whole belly.", "My upper stomach aches after eating."),
        },
    },
    {
        "diagnosis": "pleurisy",
        "recommendation": "anti-inflammatory painkillers",
        "category": "Respiratory System Diseases",
        "self_reports": (
            "Taking a deep breath feels sharp.",
            "I feel a stabbing sensation when breathing in.",
            "Breathing deeply makes me wince.",
            "My side catches when I inhale.",
        ),
        "answers": {
            "cough": ("I have a dry cough that makes it worse.", "I cough now and then.",
                      "A short cough started last week.", "Coughing makes me hold my side."),
            "pain": ("It stabs on the right side of my chest.", "The ache sits under my left ribs.",
                     "It is sharp along my side when I breathe.", "It hurts at the lower edge of my ribs."),
        },
    },
    {
        "diagnosis": "pneumonia",
        "recommendation": "chest x-ray then antibiotics",
        "category": "Infectious Diseases",
        "self_reports": (
            "I feel very weak and short of breath.",
            "I am exhausted and breathing fast.",
            "I have shivers and feel very ill.",
            "I am breathless even at rest.",
        ),
        "answers": {
            "fever": ("My temperature is 39.5 degrees.", "I have a high fever with shaking chills.",
                      "The fever will not come down with paracetamol.", "I have been burning up for days."),
            "cough": ("I cough up rusty coloured sputum.", "My cough brings up thick green mucus.",
                      "The cough is deep and wet.", "I cough so much my chest hurts."),
            "pain": ("It hurts on the right side when I breathe in.", "The ache is deep in my left chest.",
                     "It stabs in my chest with every cough.", "My back hurts behind the lungs."),
        },
    },
)


def _disease_case(disease_idx: int, variant: int, case_id: str, split: str) -> ConsultationCase:
    d = _DISEASES[disease_idx]
    turns = [GoldTurn(TOPIC_QUESTIONS["duration"], _DURATIONS[variant % len(_DURATIONS)])]
    for topic, answers in d["answers"].items():
        turns.append(GoldTurn(TOPIC_QUESTIONS[topic], answers[variant % len(answers)]))
    return ConsultationCase(
        case_id=case_id,
        self_report=d["self_reports"][variant % len(d["self_reports"])],
        gold_turns=tuple(turns),
        gold_diagnosis=d["diagnosis"],
        gold_recommendation=d["recommendation"],
        disease_category=d["category"],
        split=split,
    )


def synthetic_diagnoses() -> list[tuple[str, str]]:
    return [(d["diagnosis"], d["recommendation"]) for d in _DISEASES]


def make_synthetic_corpus(n: int = 20, seed: int | None = None, test_fraction: float = 0.25) -> list[ConsultationCase]:
    """Deterministic synthetic corpus.

    With ``seed=None`` cases cycle through diseases and variants in order and every
    fifth case goes to the test split. With a seed, disease, variant and split are
    drawn at random.
    """
    cases = []
    rng = np.random.default_rng(seed) if seed is not None else None
    for i in range(n):
        if rng is None:
            disease, variant = i % len(_DISEASES), i // len(_DISEASES)
            split = "test" if i % 5 == 4 else "train"
        else:
            disease = int(rng.integers(len(_DISEASES)))
            variant = int(rng.integers(len(_DURATIONS)))
            split = "test" if rng.random() < test_fraction else "train"
        cases.append(_disease_case(disease, variant, f"syn-{i:04d}", split))
    return cases


def truncated_case(case: ConsultationCase, n_turns: int, case_id: str | None = None) -> ConsultationCase:
    return replace(case, gold_turns=case.gold_turns[:n_turns], case_id=case_id or case.case_id)


def bundled_corpus_path() -> Path:
    return Path(str(resources.files("consult_rl") / "data" / "synthetic_corpus.jsonl"))


def bundled_manifest() -> dict:
    path = resources.files("consult_rl") / "data" / "synthetic_manifest.json"
    return json.loads(path.read_text(encoding="utf-8"))


def load_bundled_corpus() -> list[ConsultationCase]:
    return load_corpus(bundled_corpus_path())
