"""Tabular softmax doctor policy over a templated action vocabulary.

Each doctor turn is a single action token. The state summary records, per
question template, whether it was asked and whether the patient answered it,
plus the remaining turn budget; together these index one row of the logits table.

Snapshot file format (JSON, UTF-8), version 1::

    {"format": "consult-rl-policy", "version": 1,
     "questions": [...], "diagnoses": [[diagnosis, recommendation], ...],
     "max_budget": int, "shape": [rows, actions],
     "rows": [[row_index, [logit, ...]], ...]}

Only rows with a non-zero entry are stored; omitted rows are all zeros.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import TOPIC_QUESTIONS, synthetic_diagnoses
from .dialogue import ActionKind, ConsultationState, DoctorAction, render_action_text

SNAPSHOT_FORMAT = "consult-rl-policy"
SNAPSHOT_VERSION = 1

# Trit per question template in the state summary.
UNASKED, REFUSED, ANSWERED = 0, 1, 2


@dataclass(frozen=True)
class ActionVocabulary:
    questions: tuple[str, ...]
    diagnoses: tuple[tuple[str, str], ...]

    def __post_init__(self):
        if not self.questions or not self.diagnoses:
            raise ValueError("vocabulary needs at least one question and one diagnosis")
        if len(set(self.questions)) != len(self.questions):
            raise ValueError("duplicate question templates")

    @property
    def n_questions(self) -> int:
        return len(self.questions)

    def __len__(self) -> int:
        return len(self.questions) + len(self.diagnoses)

    def is_question(self, index: int) -> bool:
        return index < len(self.questions)

    def render(self, index: int) -> str:
        if self.is_question(index):
            return render_action_text(question=self.questions[index])
        diag, rec = self.diagnoses[index - len(self.questions)]
        return render_action_text(diagnosis=diag, recommendation=rec)

    def action(self, index: int) -> DoctorAction:
        if not 0 <= index < len(self):
            raise IndexError(f"action index {index} out of range")
        if self.is_question(index):
            return DoctorAction(ActionKind.QUERY, question=self.questions[index], raw=self.render(index))
        diag, rec = self.diagnoses[index - len(self.questions)]
        return DoctorAction(ActionKind.DIAGNOSE, diagnosis=diag, recommendation=rec, raw=self.render(index))

    def question_index(self, text: str) -> int | None:
        try:
            return self.questions.index(text)
        except ValueError:
            return None


def default_vocabulary() -> ActionVocabulary:
    return ActionVocabulary(tuple(TOPIC_QUESTIONS.values()), tuple(synthetic_diagnoses()))


@dataclass(frozen=True)
class StateSummary:
    asked_mask: int
    revealed_mask: int
    budget_remaining: int

    def index(self, n_questions: int, max_budget: int) -> int:
        if not 0 <= self.budget_remaining <= max_budget:
            raise IndexError(f"budget_remaining {self.budget_remaining} outside [0, {max_budget}]")
        code = 0
        for q in reversed(range(n_questions)):
            bit = 1 << q
            trit = ANSWERED if self.revealed_mask & bit else REFUSED if self.asked_mask & bit else UNASKED
            code = code * 3 + trit
        return code * (max_budget + 1) + self.budget_remaining


def summarize(state: ConsultationState, vocab: ActionVocabulary) -> StateSummary:
    """Deterministic summary of the dialogue so far.

    A template counts as revealed when any asking of it drew a Normal reply.
    Questions outside the vocabulary do not affect the summary.
    """
    asked = revealed = 0
    for turn in state.turns:
        q = vocab.question_index(turn.doctor_text)
        if q is None:
            continue
        asked |= 1 << q
        if turn.reply_kind == "Normal":
            revealed |= 1 << q
    return StateSummary(asked, revealed, state.budget_remaining)


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max()
    return shifted - np.log(np.exp(shifted).sum())


class TabularPolicy:
    def __init__(self, vocab: ActionVocabulary, max_budget: int = 10, logits: np.ndarray | None = None):
        self.vocab = vocab
        self.max_budget = max_budget
        shape = (3 ** vocab.n_questions * (max_budget + 1), len(vocab))
        if logits is None:
            logits = np.zeros(shape)
        elif logits.shape != shape:
            raise ValueError(f"logits shape {logits.shape} != expected {shape}")
        self.logits = logits

    @property
    def n_rows(self) -> int:
        return self.logits.shape[0]

    @property
    def n_actions(self) -> int:
        return self.logits.shape[1]

    def copy(self) -> "TabularPolicy":
        return TabularPolicy(self.vocab, self.max_budget, self.logits.copy())

    def row_of(self, summary: StateSummary) -> int:
        return summary.index(self.vocab.n_questions, self.max_budget)

    def action_logits(self, row: int) -> np.ndarray:
        if not 0 <= row < self.n_rows:
            raise IndexError(f"summary row {row} out of range [0, {self.n_rows})")
        return self.logits[row].copy()

    def log_probs(self, row: int, temperature: float = 1.0) -> np.ndarray:
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        return log_softmax(self.action_logits(row) / temperature)

    def probs(self, row: int, temperature: float = 1.0) -> np.ndarray:
        return np.exp(self.log_probs(row, temperature))

    def logprob_of(self, row: int, action: int, temperature: float = 1.0) -> float:
        return float(self.log_probs(row, temperature)[action])

    def sample_action(self, row: int, temperature: float, rng: np.random.Generator) -> tuple[int, float]:
        logp = self.log_probs(row, temperature)
        cdf = np.cumsum(np.exp(logp))
        a = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        a = min(a, len(cdf) - 1)
        return a, float(logp[a])

    def logprob_grad(self, row: int, action: int, temperature: float = 1.0) -> np.ndarray:
        """d log p(action) / d logits[row, :]; every other row has zero gradient."""
        g = -self.probs(row, temperature)
        g[action] += 1.0
        return g / temperature

    def entropy(self, row: int, temperature: float = 1.0) -> float:
        logp = self.log_probs(row, temperature)
        return float(-(np.exp(logp) * logp).sum())

    def entropy_grad(self, row: int, temperature: float = 1.0) -> np.ndarray:
        logp = self.log_probs(row, temperature)
        p = np.exp(logp)
        h = -(p * logp).sum()
        return -p * (logp + h) / temperature

    # -- snapshots ---------------------------------------------------------

    def to_json(self) -> str:
        rows = [[int(i), [float(x) for x in self.logits[i]]] for i in np.flatnonzero(np.any(self.logits != 0, axis=1))]
        doc = {
            "format": SNAPSHOT_FORMAT,
            "version": SNAPSHOT_VERSION,
            "questions": list(self.vocab.questions),
            "diagnoses": [list(d) for d in self.vocab.diagnoses],
            "max_budget": self.max_budget,
            "shape": list(self.logits.shape),
            "rows": rows,
        }
        return json.dumps(doc, ensure_ascii=False)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def from_json(cls, text: str) -> "TabularPolicy":
        doc = json.loads(text)
        if doc.get("format") != SNAPSHOT_FORMAT:
            raise ValueError("not a policy snapshot")
        if doc.get("version") != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported snapshot version {doc.get('version')}")
        vocab = ActionVocabulary(tuple(doc["questions"]), tuple(tuple(d) for d in doc["diagnoses"]))
        logits = np.zeros(tuple(doc["shape"]))
        for idx, values in doc["rows"]:
            logits[idx] = values
        if not np.all(np.isfinite(logits)):
            raise ValueError("snapshot contains non-finite logits")
        return cls(vocab, int(doc["max_budget"]), logits)

    @classmethod
    def load(cls, path: str | Path) -> "TabularPolicy":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


class ToyDoctor:
    """Doctor agent driven by a TabularPolicy; records the row and log-prob of each choice."""

    def __init__(self, policy: TabularPolicy, temperature: float = 0.7):
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        self.policy = policy
        self.temperature = temperature

    def act(self, state: ConsultationState, case, rng: np.random.Generator) -> tuple[str, int, int, float]:
        row = self.policy.row_of(summarize(state, self.policy.vocab))
        a, logp = self.policy.sample_action(row, self.temperature, rng)
        return self.policy.vocab.render(a), row, a, logp


class OracleDoctor:
    """Asks every gold question in order, then gives the gold diagnosis.

    Diagnoses early when only one turn of budget is left.
    """

    def act(self, state: ConsultationState, case, rng=None) -> tuple[str, None, None, None]:
        asked = len(state.turns)
        if asked < len(case.gold_turns) and state.budget_remaining > 1:
            return render_action_text(question=case.gold_turns[asked].doctor_question), None, None, None
        return render_action_text(diagnosis=case.gold_diagnosis, recommendation=case.gold_recommendation), None, None, None
