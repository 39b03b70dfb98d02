"""Episode rollout: doctor and patient alternate until diagnosis or budget exhaustion."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .dataset import ConsultationCase
from .dialogue import (
    ActionKind,
    ConsultationState,
    DoctorAction,
    Turn,
    advance,
    initial_state,
    parse_doctor_action,
)
from .patient import PatientReply, ScriptedPatient, build_profile
from .rewards import RewardBreakdown, events_from_state, total_reward

PATIENT_TOKEN = -1
# Doctor token from a non-tabular doctor (scripted, LLM, human console): no log-probs.
EXTERNAL_TOKEN = -2
# Log-prob placeholder for patient tokens; never read by the objective.
SENTINEL_LOGP = 0.0


class Doctor(Protocol):
    def act(self, state: ConsultationState, case: ConsultationCase, rng: np.random.Generator): ...


class Patient(Protocol):
    def reply(self, action: DoctorAction, history: Sequence[str]) -> PatientReply: ...


@dataclass
class TokenRecord:
    token_id: int
    mask: int
    logp_old: float | None = SENTINEL_LOGP
    logp_ref: float = SENTINEL_LOGP
    logp_current: float = SENTINEL_LOGP
    row: int = -1


@dataclass
class Trajectory:
    case_id: str
    tokens: list[TokenRecord]
    state: ConsultationState
    reward: RewardBreakdown | None = None

    @property
    def n_doctor_tokens(self) -> int:
        return sum(t.mask for t in self.tokens)


def question_history(state: ConsultationState) -> list[str]:
    return [t.doctor_text for t in state.turns if t.action_kind is ActionKind.QUERY]


def run_episode(
    case: ConsultationCase,
    doctor: Doctor,
    budget: int,
    rng: np.random.Generator,
    patient: Patient | None = None,
    ref_policy=None,
    temperature: float = 1.0,
    force_final_diagnosis: bool = False,
) -> Trajectory:
    """Play one consultation and score it.

    ``ref_policy`` (a TabularPolicy) fills logp_ref for doctor tokens produced by a
    tabular doctor; other doctors leave the log-prob fields at their sentinels.
    """
    if patient is None:
        patient = ScriptedPatient(build_profile(case))
    state = initial_state(case.case_id, budget, force_final_diagnosis)
    tokens: list[TokenRecord] = []
    while not state.terminal:
        text, row, token, logp = doctor.act(state, case, rng)
        action = parse_doctor_action(text)
        if token is None:
            rec = TokenRecord(token_id=EXTERNAL_TOKEN, mask=1, logp_old=None)
        else:
            rec = TokenRecord(token_id=token, mask=1)
            rec.row = row
            rec.logp_old = rec.logp_current = logp
            rec.logp_ref = logp if ref_policy is None else ref_policy.logprob_of(row, token, temperature)
        tokens.append(rec)
        if action.kind is ActionKind.DIAGNOSE:
            state = advance(state, action, None)
        else:
            reply = patient.reply(action, question_history(state))
            state = advance(state, action, reply)
            tokens.append(TokenRecord(token_id=PATIENT_TOKEN, mask=0))
    traj = Trajectory(case.case_id, tokens, state)
    traj.reward = total_reward(state, case)
    return traj


# -- transcript records ------------------------------------------------------

def transcript_record(traj: Trajectory, case: ConsultationCase) -> dict:
    """Corpus record extended with the played episode and its reward breakdown."""
    record = case.to_record()
    state = traj.state
    record["episode"] = {
        "budget": state.budget_total,
        "turns": [
            {
                "doctor": t.doctor_text,
                "patient": t.patient_text,
                "action_kind": t.action_kind.value,
                "reply_kind": t.reply_kind,
            }
            for t in state.turns
        ],
        "final_diagnosis": list(state.final_diagnosis) if state.final_diagnosis else None,
        "final_doctor_text": state.final_doctor_text,
        "doctor_messages": state.doctor_messages,
        "events": [e.value for e in events_from_state(state)],
        "reward": traj.reward.to_dict() if traj.reward else None,
    }
    return record


def state_from_transcript(record: dict) -> ConsultationState:
    ep = record["episode"]
    turns = tuple(
        Turn(t["doctor"], t["patient"], ActionKind(t["action_kind"]), t["reply_kind"]) for t in ep["turns"]
    )
    final = tuple(ep["final_diagnosis"]) if ep.get("final_diagnosis") else None
    return ConsultationState(
        case_id=record["case_id"],
        budget_total=int(ep["budget"]),
        turns=turns,
        final_diagnosis=final,
        final_doctor_text=ep.get("final_doctor_text", ""),
    )
