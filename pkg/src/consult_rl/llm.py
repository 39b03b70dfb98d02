"""Chat-completion client and the LLM-backed agents, judges and data passes built on it.

The API key is read from the ``CONSULT_RL_API_KEY`` environment variable only.
Any OpenAI-compatible ``/chat/completions`` endpoint works.
"""

from __future__ import annotations

import itertools
import json
import logging
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence
from urllib.parse import urlparse

import httpx

from .dataset import ConsultationCase, GoldTurn
from .dialogue import ActionKind, ConsultationState, DoctorAction, parse_doctor_action, render_doctor_context
from .patient import PatientReply, classify_reply_text
from .text import content_words, extract_tag

log = logging.getLogger(__name__)

API_KEY_ENV = "CONSULT_RL_API_KEY"
RETRYABLE_STATUS = frozenset({408, 429, 500, 502, 503, 504})


class LLMError(Exception):
    pass


class CredentialMissing(LLMError):
    pass


class TransportError(LLMError):
    pass


class MalformedResponse(LLMError):
    pass


class UnparseableVerdict(LLMError):
    pass


@dataclass
class ClientConfig:
    endpoint: str
    model: str
    temperature: float = 0.0
    max_tokens: int = 1024
    timeout: float = 60.0
    retries: int = 3
    backoff_base: float = 0.5
    backoff_max: float = 16.0
    max_concurrency: int = 4


@dataclass
class ChatRequest:
    endpoint: str
    model_name: str
    messages: list[dict]
    temperature: float = 0.0
    max_tokens: int = 1024
    timeout: float = 60.0
    retries: int = 3

    def __post_init__(self):
        if self.retries < 0:
            raise ValueError("retries must be >= 0")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        parsed = urlparse(self.endpoint)
        if parsed.scheme not in ("http", "https") or not parsed.netloc:
            raise ValueError(f"malformed endpoint URL {self.endpoint!r}")

    @classmethod
    def from_config(cls, config: ClientConfig, messages: list[dict]) -> "ChatRequest":
        return cls(
            endpoint=config.endpoint,
            model_name=config.model,
            messages=messages,
            temperature=config.temperature,
            max_tokens=config.max_tokens,
            timeout=config.timeout,
            retries=config.retries,
        )

    @property
    def url(self) -> str:
        base = self.endpoint.rstrip("/")
        return base if base.endswith("/chat/completions") else base + "/chat/completions"

    def payload(self) -> dict:
        return {
            "model": self.model_name,
            "messages": self.messages,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }


@dataclass
class ChatResult:
    text: str
    attempts: int
    request_id: int


_request_ids = itertools.count(1)


def get_api_key(api_key: str | None = None) -> str:
    key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
    if not key:
        raise CredentialMissing(f"set {API_KEY_ENV} to call a chat endpoint")
    return key


def chat_with_meta(
    request: ChatRequest,
    *,
    api_key: str | None = None,
    http: httpx.Client | None = None,
    sleep: Callable[[float], None] = time.sleep,
    backoff_base: float = 0.5,
    backoff_max: float = 16.0,
) -> ChatResult:
    """POST one chat request, retrying timeouts, 408/429 and 5xx with exponential backoff."""
    key = get_api_key(api_key)
    rid = next(_request_ids)
    headers = {"Authorization": f"Bearer {key}", "Content-Type": "application/json"}
    owns_client = http is None
    client = http or httpx.Client()
    try:
        last_error = "no attempt made"
        for attempt in range(1, request.retries + 2):
            try:
                resp = client.post(request.url, json=request.payload(), headers=headers, timeout=request.timeout)
            except httpx.TimeoutException as exc:
                last_error = f"timeout: {exc}"
            except httpx.TransportError as exc:
                last_error = f"transport: {exc}"
            else:
                if resp.status_code == 200:
                    text = _assistant_content(resp)
                    log.info("request %d: ok after %d attempt(s)", rid, attempt)
                    return ChatResult(text, attempt, rid)
                if resp.status_code not in RETRYABLE_STATUS:
                    raise TransportError(f"request {rid}: HTTP {resp.status_code}: {resp.text[:200]}")
                last_error = f"HTTP {resp.status_code}"
            log.warning("request %d: attempt %d failed (%s)", rid, attempt, last_error)
            if attempt <= request.retries:
                sleep(min(backoff_max, backoff_base * 2 ** (attempt - 1)))
        raise TransportError(f"request {rid}: giving up after {request.retries + 1} attempt(s): {last_error}")
    finally:
        if owns_client:
            client.close()


def _assistant_content(resp: httpx.Response) -> str:
    try:
        data = resp.json()
        content = data["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise MalformedResponse(f"no assistant content in response: {resp.text[:200]}") from exc
    if not isinstance(content, str):
        raise MalformedResponse("assistant content is not text")
    return content


def chat(request: ChatRequest, **kwargs) -> str:
    return chat_with_meta(request, **kwargs).text


class ChatClient:
    """Connection-pooled client bound to one endpoint/model configuration."""

    def __init__(
        self,
        config: ClientConfig,
        api_key: str | None = None,
        http: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.config = config
        self.api_key = get_api_key(api_key)
        self.http = http or httpx.Client(limits=httpx.Limits(max_connections=config.max_concurrency))
        self.sleep = sleep

    def complete(self, messages: list[dict]) -> ChatResult:
        return chat_with_meta(
            ChatRequest.from_config(self.config, messages),
            api_key=self.api_key,
            http=self.http,
            sleep=self.sleep,
            backoff_base=self.config.backoff_base,
            backoff_max=self.config.backoff_max,
        )

    def ask(self, prompt: str) -> str:
        return self.complete([{"role": "user", "content": prompt}]).text

    def complete_many(self, conversations: Sequence[list[dict]]) -> list[ChatResult]:
        """Run requests with at most ``max_concurrency`` in flight; results keep input order."""
        with ThreadPoolExecutor(max_workers=max(1, self.config.max_concurrency)) as pool:
            return list(pool.map(self.complete, conversations))

    def close(self) -> None:
        self.http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# -- judges --------------------------------------------------------------------

SIMILARITY_JUDGE_PROMPT = """\
Task: As a medical expert, evaluate the semantic similarity between the model-generated medical text and the ground truth reference. Score on a 0–5 point scale based on meaning alignment (wording differences are acceptable if meaning matches).
Criteria:
5: Identical meaning (different wording okay).
4: Minor wording/detail differences; overall meaning aligned.
3: Partial meaning overlap; important differences exist but core intent is partially shared.
2: Limited meaning overlap; key details or context differ significantly.
1: Minimal meaning overlap; mostly unrelated or only superficially related.
0: Unrelated or completely different meaning (no meaningful semantic connection).

Now evaluate:
Candidate: "{candidate}"
Reference: "{reference}"
OUTPUT FORMAT: <think> [Your Thinking Process] </think><answer> [Your Score] </answer>"""

PATIENT_JUDGE_PROMPT = """\
You are evaluating the quality of a patient's simulated responses during a medical consultation.

Original self-report: {self_report}
Diagnosis: {diagnosis}
Recommendation: {recommendation}
Doctor's questions and simulated patient answers: {simulated_dialogue}

Instructions:
1. Information Control Rate (0-1):
  - Check whether the patient's answers include extra information not asked by the doctor.
  - Deduct 20% for each extra information point.
  - Score = max(0, 1 - 0.2 × number_of_extra_points)

2. Response Completeness Rate (0-1):
  - Check whether the patient answered all points asked by the doctor.
  - Deduct 20% for each missing information point.
  - Score = max(0, 1 - 0.2 × number_of_missing_points)

3. Factual Conflict Rate (0-1):
  - Check if the patient's response is completely opposite to the original self-report.
  - Increase 20% for each completely opposite found.
  - Score = min(1, 1 - 0.2 × number_of_opposite)

Return ONLY in JSON format:
{{
  "information_control_rate": float,
  "response_completeness_rate": float,
  "factual_conflict_rate": float
}}"""

REPROMPT = "Your previous reply could not be parsed. Reply again, strictly in the required output format."


@dataclass(frozen=True)
class JudgeScore:
    raw: int
    percent: float

    @classmethod
    def from_raw(cls, raw: int) -> "JudgeScore":
        if not 0 <= raw <= 5:
            raise ValueError("raw judge score must lie in [0, 5]")
        return cls(raw, raw * 20.0)


@dataclass(frozen=True)
class PatientFidelity:
    information_control_rate: float
    response_completeness_rate: float
    factual_conflict_rate: float

    def __post_init__(self):
        for name in ("information_control_rate", "response_completeness_rate", "factual_conflict_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")


def rubric_rate(n_points: int) -> float:
    """Deduct 0.2 per counted point, floored at zero."""
    return max(0.0, 1.0 - 0.2 * n_points)


def parse_similarity_verdict(reply: str) -> int | None:
    """Integer inside the answer block, clamped to [0, 5]; None if there is none."""
    block = extract_tag(reply, "answer")
    if block is None:
        return None
    m = re.search(r"-?\d+(?:\.\d+)?", block)
    if not m:
        return None
    value = round(float(m.group()))
    if not 0 <= value <= 5:
        log.warning("judge score %s outside [0, 5], clamping", m.group())
        value = min(5, max(0, value))
    return int(value)


def parse_fidelity_verdict(reply: str) -> PatientFidelity | None:
    m = re.search(r"\{.*\}", reply, flags=re.DOTALL)
    if not m:
        return None
    try:
        data = json.loads(m.group())
        return PatientFidelity(
            float(data["information_control_rate"]),
            float(data["response_completeness_rate"]),
            float(data["factual_conflict_rate"]),
        )
    except (ValueError, KeyError, TypeError) as exc:
        log.warning("rejecting patient-fidelity verdict: %s", exc)
        return None


def _judge(client: ChatClient, prompt: str, parse: Callable[[str], object]):
    messages = [{"role": "user", "content": prompt}]
    reply = client.complete(messages).text
    verdict = parse(reply)
    if verdict is not None:
        return verdict
    messages += [{"role": "assistant", "content": reply}, {"role": "user", "content": REPROMPT}]
    reply = client.complete(messages).text
    verdict = parse(reply)
    if verdict is None:
        raise UnparseableVerdict(f"judge reply not parseable after re-prompt: {reply[:200]!r}")
    return verdict


def judge_similarity(candidate: str, reference: str, client: ChatClient) -> JudgeScore:
    if not reference.strip():
        raise ValueError("reference text is empty")
    prompt = SIMILARITY_JUDGE_PROMPT.format(candidate=candidate, reference=reference)
    return JudgeScore.from_raw(_judge(client, prompt, parse_similarity_verdict))


def render_dialogue(turns: Sequence[tuple[str, str]]) -> str:
    return "\n".join(f"Doctor: {q}\nPatient: {a}" for q, a in turns)


def judge_patient(case: ConsultationCase, dialogue: Sequence[tuple[str, str]], client: ChatClient) -> PatientFidelity:
    if not dialogue:
        raise ValueError("simulated dialogue is empty")
    prompt = PATIENT_JUDGE_PROMPT.format(
        self_report=case.self_report,
        diagnosis=case.gold_diagnosis,
        recommendation=case.gold_recommendation,
        simulated_dialogue=render_dialogue(dialogue),
    )
    return _judge(client, prompt, parse_fidelity_verdict)


# -- LLM agents ----------------------------------------------------------------

PATIENT_PROMPT = """\
You are interacting with a doctor.
Medical Response Instructions:
Answer each medical question concisely in one sentence, strictly describing symptoms while avoiding any mention of diagnoses or recommendations.
If the question is unrelated to your chief complaint, state: "Sorry, I cannot answer this question."
If the question is repetitive, reply: "Sorry, you've already asked this question."
Your chief complaint:
{description}
doctor's question history:
{history_questions}
Current doctor question:
{question}
Output format:
<think>[Your reasoning]</think><answer>[Your response]</answer>"""


class LLMDoctor:
    """Doctor agent backed by a chat endpoint; output goes through the action grammar."""

    def __init__(self, client: ChatClient):
        self.client = client

    def act(self, state: ConsultationState, case: ConsultationCase, rng=None):
        prompt = render_doctor_context(state, case)
        return self.client.ask(prompt), None, None, None


def llm_doctor_step(state: ConsultationState, case: ConsultationCase, client: ChatClient) -> DoctorAction:
    text, *_ = LLMDoctor(client).act(state, case)
    return parse_doctor_action(text)


def classify_patient_text(text: str) -> PatientReply:
    answer = extract_tag(text, "answer")
    reply = classify_reply_text(answer if answer is not None else text)
    if not reply.text:
        raise MalformedResponse("patient reply is empty")
    return reply


def patient_description(case: ConsultationCase) -> str:
    if case.enhanced_text:
        return case.enhanced_text
    answers = " ".join(t.patient_answer for t in case.gold_turns)
    return f"{case.self_report} {answers}".strip()


class LLMPatient:
    """Patient agent backed by a chat endpoint, seeded with the case description."""

    def __init__(self, case: ConsultationCase, client: ChatClient):
        self.description = patient_description(case)
        self.client = client

    def reply(self, action: DoctorAction, history: Sequence[str]) -> PatientReply:
        if action.kind is ActionKind.DIAGNOSE:
            return PatientReply.empty()
        question = action.question if action.kind is ActionKind.QUERY else action.raw
        return llm_patient_step(self.description, question, history, self.client)


def llm_patient_step(description: str, question: str, history: Sequence[str], client: ChatClient) -> PatientReply:
    prompt = PATIENT_PROMPT.format(
        description=description,
        history_questions="\n".join(history) if history else "(none)",
        question=question,
    )
    return classify_patient_text(client.ask(prompt))


# -- data passes ---------------------------------------------------------------

ENHANCE_PROMPT = """\
As a medical assistant, expand the patient's symptom description based on:
- Original self-report: {self_report}
- Dialogue history: {dialogue_history}
- Diagnosis: {diagnosis}
- Recommendation: {recommendation}

Processing Rules:
1. Summarize the patient's information: Combine the 'Original self-report' and all patient responses from 'dialogue' into a single coherent paragraph. Include only factual patient statements and exclude the doctor's questions. If a patient response only makes sense in the context of the doctor's question, infer its meaning based on the context.
2. Based on diagnosis and recommendations, add medical evidence to clearly support symptoms.
3. Never contradict the patient's original statements.
4. Keep the language natural and clinical.
5. Return ONLY the enhanced description."""

DISTILL_PROMPT = """\
Below is a doctor-patient consultation that ends in a diagnosis. Rewrite it so that every doctor question is preceded by the doctor's private reasoning inside <think></think> tags: the working hypotheses, how the answers so far support or weaken them, and which competing diagnosis the next question is meant to rule in or out. Keep every question and answer verbatim.

Patient self-report: {self_report}
{dialogue}
Final diagnosis: {diagnosis}
Recommendation: {recommendation}

Return one block per round in the form:
<think>...</think><answer>Question: ...</answer>
Patient: ...
and end with <think>...</think><answer>Diagnosis: ...
Recommendation: ...</answer>"""

DENOISE_PROMPT = """\
The consultation below was transcribed from a real clinic chat. List the round numbers whose doctor question or patient answer is meaningless filler (greetings, typing noise, "ok", repeated punctuation), but only when at least two such rounds are consecutive. Reply with JSON only: {{"noisy_rounds": [int, ...]}}

{dialogue}"""

_NEGATIONS = ("no ", "not ", "denies ", "without ", "never ", "absence of ")


def find_contradictions(self_report: str, enhanced: str) -> list[str]:
    """Phrases in ``enhanced`` that negate a content word of the self-report."""
    low = enhanced.lower()
    hits = []
    for word in sorted(content_words(self_report)):
        for neg in _NEGATIONS:
            phrase = neg + word
            if re.search(rf"\b{re.escape(phrase)}\b", low):
                hits.append(phrase)
    return hits


@dataclass
class EnhancedProfile:
    case: ConsultationCase
    contradictions: list[str] = field(default_factory=list)


def enhance_profile(case: ConsultationCase, client: ChatClient) -> EnhancedProfile:
    """Attach an LLM-expanded description to the case; gold fields are untouched."""
    prompt = ENHANCE_PROMPT.format(
        self_report=case.self_report,
        dialogue_history=render_dialogue([(t.doctor_question, t.patient_answer) for t in case.gold_turns]),
        diagnosis=case.gold_diagnosis,
        recommendation=case.gold_recommendation,
    )
    text = client.ask(prompt).strip()
    flagged = find_contradictions(case.self_report, text)
    if flagged:
        log.warning("case %s: enhanced profile may contradict self-report: %s", case.case_id, flagged)
    return EnhancedProfile(replace(case, enhanced_text=text), flagged)


def enhance_corpus(cases: Sequence[ConsultationCase], client: ChatClient) -> list[EnhancedProfile]:
    with ThreadPoolExecutor(max_workers=max(1, client.config.max_concurrency)) as pool:
        return list(pool.map(lambda c: enhance_profile(c, client), cases))


@dataclass
class DistilledDialogue:
    case_id: str
    reasoning_text: str


def distill_reasoning(case: ConsultationCase, client: ChatClient) -> DistilledDialogue:
    prompt = DISTILL_PROMPT.format(
        self_report=case.self_report,
        dialogue=render_dialogue([(t.doctor_question, t.patient_answer) for t in case.gold_turns]),
        diagnosis=case.gold_diagnosis,
        recommendation=case.gold_recommendation,
    )
    return DistilledDialogue(case.case_id, client.ask(prompt))


def denoise_case(case: ConsultationCase, client: ChatClient) -> ConsultationCase:
    """Drop gold turns the LLM marks as consecutive meaningless filler."""
    dialogue = "\n".join(
        f"Round {i}: Doctor: {t.doctor_question} | Patient: {t.patient_answer}"
        for i, t in enumerate(case.gold_turns, start=1)
    )
    reply = client.ask(DENOISE_PROMPT.format(dialogue=dialogue))
    m = re.search(r"\{.*\}", reply, flags=re.DOTALL)
    try:
        noisy = {int(i) for i in json.loads(m.group())["noisy_rounds"]} if m else set()
    except (ValueError, KeyError, TypeError) as exc:
        raise MalformedResponse(f"denoise reply not parseable: {reply[:200]!r}") from exc
    kept: tuple[GoldTurn, ...] = tuple(t for i, t in enumerate(case.gold_turns, start=1) if i not in noisy)
    return replace(case, gold_turns=kept)
