"""``consult-rl`` command-line entry point.

Subcommands: simulate, train, score, judge, stats, consult.
Exit codes: 0 success, 1 validation or configuration error, 2 runtime error, 3 network error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path
from typing import Sequence, TextIO

import numpy as np

from .dataset import (
    ConsultationCase,
    SchemaError,
    clean_corpus,
    corpus_stats,
    load_bundled_corpus,
    load_corpus,
    save_corpus,
)
from .dialogue import (
    ActionKind,
    DEFAULT_MAX_TURNS,
    DEFAULT_MIN_TURNS,
    advance,
    initial_state,
    parse_doctor_action,
    sample_turn_budget,
)
from .episode import Trajectory, question_history, run_episode, state_from_transcript, transcript_record
from .grpo import GrpoConfig, NonFiniteError, evaluate_policy, train_loop
from .llm import (
    ChatClient,
    ClientConfig,
    CredentialMissing,
    LLMDoctor,
    LLMError,
    LLMPatient,
    MalformedResponse,
    TransportError,
    judge_patient,
    judge_similarity,
)
from .patient import PatientReply, classify_reply_text
from .policy import OracleDoctor, TabularPolicy, ToyDoctor, default_vocabulary
from .rewards import total_reward, word_f1

log = logging.getLogger("consult_rl")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_NETWORK = 0, 1, 2, 3


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


# -- shared helpers --------------------------------------------------------------

def _load_cases(path: str | None) -> list[ConsultationCase]:
    cases = load_bundled_corpus() if path is None else load_corpus(path)
    if not cases:
        raise UsageError("corpus is empty")
    return cases


def _budget_bounds(args) -> tuple[int | None, int, int]:
    """(fixed budget or None, dynamic min, dynamic max) after validation."""
    fixed = args.budget if args.budget is not None else args.fixed_budget
    lo, hi = args.budget_range or (DEFAULT_MIN_TURNS, DEFAULT_MAX_TURNS)
    if fixed is not None and fixed < 1:
        raise UsageError("budget must be >= 1")
    if lo < 1 or lo > hi:
        raise UsageError(f"invalid budget range [{lo}, {hi}]")
    return fixed, lo, hi


def _client(args) -> ChatClient:
    if not args.endpoint or not args.model:
        raise UsageError("--endpoint and --model are both required for LLM-backed runs")
    return ChatClient(ClientConfig(endpoint=args.endpoint, model=args.model, max_concurrency=max(1, args.jobs)))


def _make_doctor(args, client: ChatClient | None = None):
    if args.doctor == "oracle":
        return OracleDoctor()
    if args.doctor == "llm":
        return LLMDoctor(client or _client(args))
    policy = TabularPolicy.load(args.snapshot) if args.snapshot else TabularPolicy(default_vocabulary())
    return ToyDoctor(policy, args.temperature)


def _open_out(path: str | None) -> TextIO:
    return open(path, "w", encoding="utf-8") if path else sys.stdout


def _write_lines(lines: Sequence[str], path: str | None) -> None:
    out = _open_out(path)
    try:
        for line in lines:
            out.write(line + "\n")
    finally:
        if out is not sys.stdout:
            out.close()


def _dumps(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True)


# -- simulate --------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cases = _load_cases(args.corpus)
    if args.split != "all":
        cases = [c for c in cases if c.split == args.split]
        if not cases:
            raise UsageError(f"no cases in split {args.split!r}")
    fixed, lo, hi = _budget_bounds(args)
    n = args.episodes if args.episodes is not None else len(cases)
    if n < 1:
        raise UsageError("--episodes must be >= 1")
    if args.temperature <= 0:
        raise UsageError("--temperature must be positive")
    client = _client(args) if "llm" in (args.doctor, args.patient) else None
    doctor = _make_doctor(args, client)
    seeds = np.random.SeedSequence(args.seed).spawn(n)

    def play(i: int) -> Trajectory:
        rng = np.random.default_rng(seeds[i])
        case = cases[i % len(cases)]
        budget = fixed if fixed is not None else sample_turn_budget(rng, lo, hi).value
        patient = LLMPatient(case, client) if args.patient == "llm" else None
        ref = doctor.policy if isinstance(doctor, ToyDoctor) else None
        return run_episode(case, doctor, budget, rng, patient=patient, ref_policy=ref, temperature=args.temperature)

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        trajs = list(pool.map(play, range(n)))
    lines = [_dumps(transcript_record(t, cases[i % len(cases)])) for i, t in enumerate(trajs)]
    _write_lines(lines, args.out)
    mean = float(np.mean([t.reward.total for t in trajs]))
    log.info("simulated %d episode(s), mean reward %.3f", n, mean)
    return EXIT_OK


# -- train -----------------------------------------------------------------------

def _grpo_config(args) -> GrpoConfig:
    fixed, lo, hi = _budget_bounds(args)
    overrides = {
        "group_size": args.group_size,
        "clip_low": args.clip_low,
        "clip_high": args.clip_high,
        "kl_coef": args.kl_coef,
        "entropy_coef": args.entropy_coef,
        "temperature": args.temperature,
        "learning_rate": args.learning_rate,
        "batch_size": args.batch_size,
        "advantage_mode": args.advantage_mode,
    }
    config = GrpoConfig(**{k: v for k, v in overrides.items() if v is not None})
    config = replace(config, min_budget=lo, max_budget=hi, fixed_budget=fixed)
    config.validate()
    return config


def cmd_train(args) -> int:
    if args.steps < 0:
        raise UsageError("--steps must be >= 0")
    config = _grpo_config(args)
    cases = _load_cases(args.corpus)
    policy = TabularPolicy.load(args.init) if args.init else TabularPolicy(default_vocabulary())
    if config.max_budget > policy.max_budget:
        raise UsageError(f"budget range exceeds the policy's max budget {policy.max_budget}")
    ref = policy.copy()
    snapshot = Path(args.snapshot)
    report = Path(args.report) if args.report else snapshot.with_suffix(".report.jsonl")
    rng = np.random.default_rng(args.seed)
    try:
        train_loop(policy, ref, cases, config, args.steps, rng, report_path=report)
    except NonFiniteError as exc:
        dump = snapshot.with_suffix(".nonfinite.json")
        policy.save(dump)
        log.error("%s; last finite policy written to %s", exc, dump)
        raise
    policy.save(snapshot)
    log.info("wrote %s and %s", snapshot, report)
    if args.eval_episodes:
        eval_rng = np.random.default_rng(np.random.SeedSequence(args.seed).spawn(1)[0])
        before = evaluate_policy(ref, cases, config, args.eval_episodes, eval_rng)
        eval_rng = np.random.default_rng(np.random.SeedSequence(args.seed).spawn(1)[0])
        after = evaluate_policy(policy, cases, config, args.eval_episodes, eval_rng)
        print(_dumps({"untrained": asdict(before), "trained": asdict(after)}))
    return EXIT_OK


# -- score -----------------------------------------------------------------------

def _read_transcripts(path: str) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON: {exc.msg}", lineno) from exc
            if "episode" not in rec:
                raise SchemaError("record has no episode block", lineno)
            records.append(rec)
    if not records:
        raise UsageError(f"{path}: no transcripts")
    return records


def score_record(record: dict) -> dict:
    case = ConsultationCase.from_record(record)
    state = state_from_transcript(record)
    breakdown = total_reward(state, case)
    diag, rec = state.final_diagnosis or ("", "")
    f1_d = word_f1(diag, case.gold_diagnosis) if state.final_diagnosis else 0.0
    f1_r = word_f1(rec, case.gold_recommendation) if state.final_diagnosis else 0.0
    return {
        "case_id": case.case_id,
        "category": case.disease_category,
        "f1_diagnosis": f1_d,
        "f1_recommendation": f1_r,
        "f1_score": 100.0 * (f1_d + f1_r) / 2,
        "doctor_messages": state.doctor_messages,
        "reward": breakdown.to_dict(),
        "recorded_reward": record["episode"].get("reward"),
    }


def _judge_record(record: dict, client: ChatClient) -> dict:
    final = record["episode"].get("final_diagnosis")
    if not final:
        return {"judge_diagnosis": 0.0, "judge_recommendation": 0.0, "judge_score": 0.0}
    d = judge_similarity(final[0], record["gold_diagnosis"], client).percent
    r = judge_similarity(final[1], record["gold_recommendation"], client).percent
    return {"judge_diagnosis": d, "judge_recommendation": r, "judge_score": (d + r) / 2}


def _aggregate(rows: list[dict], keys: Sequence[str]) -> dict:
    out = {"n": len(rows)}
    for k in keys:
        out[k] = float(np.mean([r[k] for r in rows]))
    out["mean_turns"] = float(np.mean([r["doctor_messages"] for r in rows]))
    out["mean_reward"] = float(np.mean([r["reward"]["total"] for r in rows]))
    return out


def cmd_score(args) -> int:
    client = _client(args) if args.judge else None
    records = _read_transcripts(args.transcripts)
    rows = [score_record(r) for r in records]
    keys = ["f1_diagnosis", "f1_recommendation", "f1_score"]
    if client is not None:
        with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
            judged = list(pool.map(lambda r: _judge_record(r, client), records))
        for row, j in zip(rows, judged):
            row.update(j)
        keys += ["judge_diagnosis", "judge_recommendation", "judge_score"]
    by_cat = defaultdict(list)
    for row in rows:
        by_cat[row["category"]].append(row)
    report = {
        "overall": _aggregate(rows, keys),
        "per_category": {cat: _aggregate(rs, keys) for cat, rs in sorted(by_cat.items())},
        "episodes": rows,
    }
    _write_lines([json.dumps(report, ensure_ascii=False, sort_keys=True, indent=2)], args.out)
    return EXIT_OK


# -- judge -----------------------------------------------------------------------

def cmd_judge(args) -> int:
    if bool(args.transcripts) == bool(args.candidate is not None or args.reference is not None):
        raise UsageError("give either --candidate/--reference or --transcripts")
    if args.transcripts is None and (args.candidate is None or args.reference is None):
        raise UsageError("--candidate and --reference go together")
    client = _client(args)
    if args.transcripts is None:
        score = judge_similarity(args.candidate, args.reference, client)
        _write_lines([_dumps(asdict(score))], args.out)
        return EXIT_OK
    records = _read_transcripts(args.transcripts)

    def fidelity(rec: dict) -> dict:
        dialogue = [(t["doctor"], t["patient"]) for t in rec["episode"]["turns"]]
        return {"case_id": rec["case_id"], **asdict(judge_patient(ConsultationCase.from_record(rec), dialogue, client))}

    usable = [r for r in records if r["episode"]["turns"]]
    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        rows = list(pool.map(fidelity, usable))
    _write_lines([_dumps(r) for r in rows], args.out)
    return EXIT_OK


# -- stats -----------------------------------------------------------------------

def cmd_stats(args) -> int:
    cases = _load_cases(args.corpus)
    if args.min_turns is not None:
        cases, dropped = clean_corpus(cases, min_turns=args.min_turns)
        log.info("dropped %d case(s) with fewer than %d gold turns", len(dropped), args.min_turns)
        if args.write_clean:
            save_corpus(cases, args.write_clean)
    stats = corpus_stats(cases)
    text = _dumps(stats.to_dict()) if args.json else stats.render()
    _write_lines([text], args.out)
    return EXIT_OK


# -- consult ---------------------------------------------------------------------

class HumanPatient:
    """Patient played by a person at the terminal. Blank lines are asked again."""

    def __init__(self, stdin: TextIO, stdout: TextIO):
        self.stdin = stdin
        self.stdout = stdout

    def reply(self, action, history) -> PatientReply:
        shown = action.question if action.kind is ActionKind.QUERY else action.raw
        print(f"Doctor: {shown}", file=self.stdout)
        while True:
            print("Patient> ", end="", file=self.stdout, flush=True)
            line = self.stdin.readline()
            if not line:
                raise EOFError
            if line.strip():
                return classify_reply_text(line)


def cmd_consult(args) -> int:
    cases = _load_cases(args.corpus)
    if args.case_id is None:
        case = cases[0]
    else:
        matches = [c for c in cases if c.case_id == args.case_id]
        if not matches:
            raise UsageError(f"case {args.case_id!r} not in corpus")
        case = matches[0]
    fixed, lo, hi = _budget_bounds(args)
    rng = np.random.default_rng(args.seed)
    budget = fixed if fixed is not None else sample_turn_budget(rng, lo, hi).value
    doctor = _make_doctor(args)
    patient = HumanPatient(sys.stdin, sys.stdout)
    print(f"You are the patient. Your complaint: {case.self_report}", file=sys.stdout)
    state = initial_state(case.case_id, budget)
    ended_early = False
    while not state.terminal:
        text, *_ = doctor.act(state, case, rng)
        action = parse_doctor_action(text)
        if action.kind is ActionKind.DIAGNOSE:
            state = advance(state, action, None)
            print(f"Doctor: Diagnosis: {action.diagnosis}\nRecommendation: {action.recommendation}")
            break
        try:
            reply = patient.reply(action, question_history(state))
        except EOFError:
            # Close the episode at the turns played so far; it scores as an
            # unfinished consultation.
            state = replace(state, budget_total=len(state.turns))
            ended_early = True
            break
        state = advance(state, action, reply)
    traj = Trajectory(case.case_id, [], state, total_reward(state, case))
    record = transcript_record(traj, case)
    record["episode"]["requested_budget"] = budget
    record["episode"]["ended_early"] = ended_early
    _write_lines([_dumps(record)], args.out)
    log.info("consultation finished, reward %.2f", traj.reward.total)
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------

def _add_budget_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--budget", type=int, help="fixed per-episode turn budget")
    g.add_argument("--fixed-budget", type=int, help="alias of --budget")
    g.add_argument("--budget-range", type=int, nargs=2, metavar=("MIN", "MAX"),
                   help=f"dynamic budget range (default {DEFAULT_MIN_TURNS} {DEFAULT_MAX_TURNS})")


def _add_llm_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--endpoint", help="OpenAI-compatible base URL")
    p.add_argument("--model", help="model name at the endpoint")


def _add_doctor_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--doctor", choices=("toy", "oracle", "llm"), default="toy")
    p.add_argument("--snapshot", help="toy policy snapshot (default: untrained uniform policy)")
    p.add_argument("--temperature", type=float, default=GrpoConfig.temperature)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--corpus", help="corpus JSONL (default: bundled synthetic corpus)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", help="output path (default: stdout)")
    common.add_argument("--jobs", type=int, default=1, help="max parallel episodes or requests")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="consult-rl", description="Multi-turn consultation RL toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", parents=[common], help="play episodes and write transcripts")
    _add_doctor_flags(p)
    _add_budget_flags(p)
    _add_llm_flags(p)
    p.add_argument("--patient", choices=("scripted", "llm"), default="scripted")
    p.add_argument("--episodes", type=int, help="number of episodes (default: one per case)")
    p.add_argument("--split", choices=("all", "train", "test"), default="all")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", parents=[common], help="GRPO-train the toy policy")
    _add_budget_flags(p)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--snapshot", default="policy.json", help="output snapshot path")
    p.add_argument("--report", help="training report JSONL (default: next to the snapshot)")
    p.add_argument("--init", help="starting snapshot (default: uniform policy)")
    p.add_argument("--group-size", type=int)
    p.add_argument("--clip-low", type=float)
    p.add_argument("--clip-high", type=float)
    p.add_argument("--kl-coef", type=float)
    p.add_argument("--entropy-coef", type=float)
    p.add_argument("--temperature", type=float)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--advantage-mode", choices=("mean_std", "mean_only"))
    p.add_argument("--eval-episodes", type=int, default=0, help="print before/after evaluation")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", parents=[common], help="score transcripts")
    p.add_argument("transcripts")
    p.add_argument("--judge", action="store_true", help="add LLM-judge similarity scores")
    _add_llm_flags(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("judge", parents=[common], help="run an LLM judge directly")
    p.add_argument("--candidate")
    p.add_argument("--reference")
    p.add_argument("--transcripts", help="judge simulated-patient fidelity for each transcript")
    _add_llm_flags(p)
    p.set_defaults(func=cmd_judge)

    p = sub.add_parser("stats", parents=[common], help="corpus statistics")
    p.add_argument("--min-turns", type=int, help="apply the cleaning filter first")
    p.add_argument("--write-clean", help="save the cleaned corpus to this path")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("consult", parents=[common], help="interactive console, you play the patient")
    _add_doctor_flags(p)
    _add_budget_flags(p)
    _add_llm_flags(p)
    p.add_argument("--case-id", help="corpus case whose labels score the session (default: first case)")
    p.set_defaults(func=cmd_consult)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("consult-rl: error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        return args.func(args)
    except (CredentialMissing, UsageError, SchemaError, FileNotFoundError, ValueError) as exc:
        print(f"consult-rl: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TransportError, MalformedResponse) as exc:
        print(f"consult-rl: network error: {exc}", file=sys.stderr)
        return EXIT_NETWORK
    except (NonFiniteError, LLMError, OSError, RuntimeError) as exc:
        print(f"consult-rl: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
