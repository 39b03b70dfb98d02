"""Group Relative Policy Optimization over consultation episodes.

The objective maximized per batch is, for each group of G trajectories sampled
for one case,

    1/G * sum_i 1/n_i * sum_{t: mask=1} [ min(rho*A_i, clip(rho, 1-eps_low, 1+eps_high)*A_i)
                                         - beta * kl_t + entropy_coef * H_t ]

with n_i the number of doctor (mask=1) tokens in trajectory i, rho the ratio of
current to sampling-time probabilities, kl_t the low-variance estimator
r - log r - 1 (r = p_ref / p_current) and H_t the policy entropy at that
decision. Groups in a batch are averaged. Patient tokens never enter.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataset import ConsultationCase
from .dialogue import DEFAULT_MAX_TURNS, DEFAULT_MIN_TURNS, sample_turn_budget
from .episode import EXTERNAL_TOKEN, Trajectory, run_episode
from .patient import ScriptedPatient, build_profile
from .policy import TabularPolicy, ToyDoctor

log = logging.getLogger(__name__)

# Actor learning rate for 7B-parameter LLM policies. The tabular policy
# uses GrpoConfig.learning_rate instead.
LLM_ACTOR_LEARNING_RATE = 1e-6


@dataclass
class GrpoConfig:
    group_size: int = 8
    clip_low: float = 0.2
    clip_high: float = 0.28
    kl_coef: float = 0.001
    entropy_coef: float = 0.001
    advantage_mode: str = "mean_std"
    temperature: float = 0.7
    numeric_eps: float = 1e-8
    kl_ratio_ceiling: float = 10.0
    learning_rate: float = 1.0
    batch_size: int = 4
    epochs: int = 1
    min_budget: int = DEFAULT_MIN_TURNS
    max_budget: int = DEFAULT_MAX_TURNS
    fixed_budget: int | None = None
    force_final_diagnosis: bool = False

    def validate(self) -> None:
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if not 0 < self.clip_low <= self.clip_high < 1:
            raise ValueError("need 0 < clip_low <= clip_high < 1")
        if self.kl_coef < 0:
            raise ValueError("kl_coef must be >= 0")
        if self.entropy_coef < 0:
            raise ValueError("entropy_coef must be >= 0")
        if self.advantage_mode not in ("mean_std", "mean_only"):
            raise ValueError(f"unknown advantage_mode {self.advantage_mode!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.kl_ratio_ceiling <= 1:
            raise ValueError("kl_ratio_ceiling must exceed 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if not 1 <= self.min_budget <= self.max_budget:
            raise ValueError("need 1 <= min_budget <= max_budget")
        if self.fixed_budget is not None and not 1 <= self.fixed_budget <= self.max_budget:
            raise ValueError(f"fixed_budget must lie in [1, {self.max_budget}]")


@dataclass
class TrajectoryGroup:
    case: ConsultationCase
    trajectories: list[Trajectory]
    advantages: np.ndarray | None = None

    @property
    def rewards(self) -> np.ndarray:
        return np.array([t.reward.total for t in self.trajectories])


def compute_advantages(rewards: Sequence[float], mode: str = "mean_std", numeric_eps: float = 1e-8) -> np.ndarray:
    """Group-relative advantages; std is the population standard deviation."""
    r = np.asarray(rewards, dtype=float)
    if r.size < 2:
        raise ValueError("a group needs at least two rewards")
    centered = r - r.mean()
    if mode == "mean_only":
        return centered
    if mode == "mean_std":
        return centered / (r.std() + numeric_eps)
    raise ValueError(f"unknown advantage mode {mode!r}")


def kl_low_var(logp_current, logp_ref, ceiling: float = 10.0):
    """Per-token k3 estimator r - log r - 1 with r = exp(logp_ref - logp_current), r clamped above."""
    r = np.minimum(np.exp(np.asarray(logp_ref, dtype=float) - np.asarray(logp_current, dtype=float)), ceiling)
    out = r - np.log(r) - 1.0
    return float(out) if np.ndim(out) == 0 else out


def rollout_group(
    policy: TabularPolicy,
    case: ConsultationCase,
    config: GrpoConfig,
    rng: np.random.Generator,
    ref_policy: TabularPolicy | None = None,
    patient_factory: Callable[[ConsultationCase], object] | None = None,
) -> TrajectoryGroup:
    """Sample G episodes for one case, each with its own patient and turn budget."""
    if config.group_size < 2:
        raise ValueError("group_size must be >= 2")
    doctor = ToyDoctor(policy, config.temperature)
    if patient_factory is None:
        base = build_profile(case)
        patient_factory = lambda _case: ScriptedPatient(base.fresh_copy())  # noqa: E731
    trajectories = []
    for _ in range(config.group_size):
        if config.fixed_budget is not None:
            budget = config.fixed_budget
        else:
            budget = sample_turn_budget(rng, config.min_budget, config.max_budget).value
        trajectories.append(
            run_episode(
                case,
                doctor,
                budget,
                rng,
                patient=patient_factory(case),
                ref_policy=ref_policy,
                temperature=config.temperature,
                force_final_diagnosis=config.force_final_diagnosis,
            )
        )
    return TrajectoryGroup(case, trajectories)


@dataclass
class ObjectiveResult:
    value: float
    grad: np.ndarray
    clip_fraction: float
    mean_kl: float
    mean_entropy: float
    n_tokens: int


def _gather(groups: Sequence[TrajectoryGroup]):
    rows, actions, logp_old, logp_ref, adv, weight = [], [], [], [], [], []
    for group in groups:
        if group.advantages is None:
            raise ValueError(f"group for case {group.case.case_id} has no advantages")
        G = len(group.trajectories)
        for traj, a_i in zip(group.trajectories, group.advantages):
            doctor_tokens = [t for t in traj.tokens if t.mask == 1]
            if not doctor_tokens:
                raise ValueError(f"trajectory for {traj.case_id} has no doctor tokens")
            w = 1.0 / (len(groups) * G * len(doctor_tokens))
            for t in doctor_tokens:
                if t.logp_old is None:
                    raise ValueError(f"doctor token in {traj.case_id} is missing logp_old")
                if t.token_id == EXTERNAL_TOKEN or t.row < 0:
                    raise ValueError(f"doctor token in {traj.case_id} was not produced by the tabular policy")
                rows.append(t.row)
                actions.append(t.token_id)
                logp_old.append(t.logp_old)
                logp_ref.append(t.logp_ref)
                adv.append(a_i)
                weight.append(w)
    return (
        np.array(rows, dtype=np.int64),
        np.array(actions, dtype=np.int64),
        np.array(logp_old, dtype=float),
        np.array(logp_ref, dtype=float),
        np.array(adv, dtype=float),
        np.array(weight, dtype=float),
    )


def grpo_objective(
    groups: TrajectoryGroup | Sequence[TrajectoryGroup], policy: TabularPolicy, config: GrpoConfig
) -> ObjectiveResult:
    """Objective value and its exact gradient with respect to ``policy.logits``."""
    if isinstance(groups, TrajectoryGroup):
        groups = [groups]
    rows, actions, logp_old, logp_ref, adv, weight = _gather(groups)
    T = config.temperature
    n = len(rows)

    z = policy.logits[rows] / T
    zmax = z.max(axis=1, keepdims=True)
    logp_all = z - zmax - np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
    p_all = np.exp(logp_all)
    logp = logp_all[np.arange(n), actions]

    ratio = np.exp(logp - logp_old)
    surr_unclipped = ratio * adv
    surr_clipped = np.clip(ratio, 1.0 - config.clip_low, 1.0 + config.clip_high) * adv
    clipped = surr_clipped < surr_unclipped
    surrogate = np.where(clipped, surr_clipped, surr_unclipped)
    d_surr = np.where(clipped, 0.0, surr_unclipped)  # d/d logp of the chosen branch

    r = np.exp(logp_ref - logp)
    capped = r >= config.kl_ratio_ceiling
    r_c = np.minimum(r, config.kl_ratio_ceiling)
    kl = r_c - np.log(r_c) - 1.0
    d_kl = np.where(capped, 0.0, 1.0 - r)

    entropy = -(p_all * logp_all).sum(axis=1)

    value = float(np.sum(weight * (surrogate - config.kl_coef * kl + config.entropy_coef * entropy)))

    coef = weight * (d_surr - config.kl_coef * d_kl)
    onehot = np.zeros_like(p_all)
    onehot[np.arange(n), actions] = 1.0
    g_rows = coef[:, None] * (onehot - p_all) / T
    g_rows += (weight * config.entropy_coef)[:, None] * (-p_all * (logp_all + entropy[:, None])) / T
    grad = np.zeros_like(policy.logits)
    np.add.at(grad, rows, g_rows)

    return ObjectiveResult(
        value=value,
        grad=grad,
        clip_fraction=float(clipped.mean()),
        mean_kl=float(kl.mean()),
        mean_entropy=float(entropy.mean()),
        n_tokens=n,
    )


@dataclass
class StepLog:
    step: int
    mean_reward: float
    mean_kl: float
    clip_fraction: float
    mean_turns: float
    objective: float
    budgets: list[int] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class TrainingReport:
    steps: list[StepLog] = field(default_factory=list)


class NonFiniteError(FloatingPointError):
    pass


def train_loop(
    policy: TabularPolicy,
    ref_policy: TabularPolicy,
    corpus: Sequence[ConsultationCase],
    config: GrpoConfig,
    steps: int,
    rng: np.random.Generator,
    report_path: str | Path | None = None,
) -> TrainingReport:
    """Run ``steps`` GRPO updates in place on ``policy``."""
    config.validate()
    if not corpus:
        raise ValueError("corpus is empty")
    profiles = {c.case_id: build_profile(c) for c in corpus}

    def patient_factory(case):
        return ScriptedPatient(profiles[case.case_id].fresh_copy())

    report = TrainingReport()
    sink = open(report_path, "w", encoding="utf-8") if report_path else None
    try:
        for step in range(steps):
            replace = config.batch_size > len(corpus)
            picks = rng.choice(len(corpus), size=config.batch_size, replace=replace)
            groups = [
                rollout_group(policy, corpus[i], config, rng, ref_policy=ref_policy, patient_factory=patient_factory)
                for i in picks
            ]
            for g in groups:
                g.advantages = compute_advantages(g.rewards, config.advantage_mode, config.numeric_eps)
            clip_fracs, kls = [], []
            for _ in range(config.epochs):
                res = grpo_objective(groups, policy, config)
                if not math.isfinite(res.value) or not np.all(np.isfinite(res.grad)):
                    raise NonFiniteError(f"non-finite objective or gradient at step {step}")
                clip_fracs.append(res.clip_fraction)
                kls.append(res.mean_kl)
                policy.logits += config.learning_rate * res.grad
            trajs = [t for g in groups for t in g.trajectories]
            entry = StepLog(
                step=step,
                mean_reward=float(np.mean([t.reward.total for t in trajs])),
                mean_kl=float(np.mean(kls)),
                clip_fraction=float(np.mean(clip_fracs)),
                mean_turns=float(np.mean([t.state.doctor_messages for t in trajs])),
                objective=res.value,
                budgets=[t.state.budget_total for t in trajs],
            )
            report.steps.append(entry)
            if sink:
                sink.write(entry.to_json() + "\n")
            log.debug("step %d mean_reward %.3f", step, entry.mean_reward)
    finally:
        if sink:
            sink.close()
    return report


@dataclass
class EvalSummary:
    mean_reward: float
    mean_questions: float
    diagnose_rate: float
    n_episodes: int


def evaluate_policy(
    policy: TabularPolicy,
    corpus: Sequence[ConsultationCase],
    config: GrpoConfig,
    n_episodes: int,
    rng: np.random.Generator,
) -> EvalSummary:
    """Mean reward and questioning behavior over ``n_episodes`` sampled episodes."""
    doctor = ToyDoctor(policy, config.temperature)
    rewards, questions, diagnosed = [], [], 0
    for _ in range(n_episodes):
        case = corpus[int(rng.integers(len(corpus)))]
        budget = config.fixed_budget or sample_turn_budget(rng, config.min_budget, config.max_budget).value
        traj = run_episode(case, doctor, budget, rng, temperature=config.temperature)
        rewards.append(traj.reward.total)
        questions.append(len(traj.state.turns))
        diagnosed += traj.state.final_diagnosis is not None
    return EvalSummary(float(np.mean(rewards)), float(np.mean(questions)), diagnosed / n_episodes, n_episodes)
