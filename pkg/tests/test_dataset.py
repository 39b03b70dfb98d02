from __future__ import annotations

import hashlib
import json

import pytest

from consult_rl.dataset import (
    CATEGORIES,
    ConsultationCase,
    DuplicateIdError,
    GoldTurn,
    SchemaError,
    TOPIC_QUESTIONS,
    bundled_corpus_path,
    bundled_manifest,
    clean_corpus,
    corpus_stats,
    load_bundled_corpus,
    load_corpus,
    make_synthetic_corpus,
    sample_eval_subset,
    save_corpus,
    truncated_case,
)
from consult_rl.patient import build_profile, respond


def test_eight_categories():
    assert len(CATEGORIES) == 8


def test_save_load_roundtrip_is_byte_identical(tmp_path):
    cases = make_synthetic_corpus(12, seed=4)
    cases[0] = ConsultationCase(**{**cases[0].__dict__, "self_report": "Fièvre et toux, 发烧"})
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    save_corpus(cases, a)
    loaded = load_corpus(a)
    assert loaded == cases
    save_corpus(loaded, b)
    assert a.read_bytes() == b.read_bytes()


def test_loader_reports_line_numbers(tmp_path):
    good = json.dumps(make_synthetic_corpus(1)[0].to_record())
    path = tmp_path / "bad.jsonl"
    path.write_text(good + "\n{not json\n", encoding="utf-8")
    with pytest.raises(SchemaError) as exc:
        load_corpus(path)
    assert exc.value.line == 2

    rec = make_synthetic_corpus(1)[0].to_record()
    del rec["gold_diagnosis"]
    path.write_text(json.dumps(rec) + "\n", encoding="utf-8")
    with pytest.raises(SchemaError, match="gold_diagnosis"):
        load_corpus(path)


def test_loader_rejects_duplicates_and_bad_fields(tmp_path):
    rec = make_synthetic_corpus(1)[0].to_record()
    path = tmp_path / "dup.jsonl"
    path.write_text((json.dumps(rec) + "\n") * 2, encoding="utf-8")
    with pytest.raises(DuplicateIdError):
        load_corpus(path)
    for field, value in [("split", "dev"), ("disease_category", "Astrology"), ("self_report", "  ")]:
        bad = {**rec, field: value}
        path.write_text(json.dumps(bad) + "\n", encoding="utf-8")
        with pytest.raises(SchemaError):
            load_corpus(path)


def test_clean_corpus_threshold():
    base = make_synthetic_corpus(1)[0]
    cases = [truncated_case(base, n, f"c{n}") for n in range(0, 5)]
    cases = [c for c in cases if len(c.gold_turns) == int(c.case_id[1:])]
    kept, dropped = clean_corpus(cases)
    assert [c.case_id for c in kept] == [f"c{n}" for n in range(3, len(base.gold_turns) + 1)]
    assert all(len(c.gold_turns) < 3 for c in dropped)
    assert len(kept) + len(dropped) == len(cases)


def test_sample_eval_subset_deterministic():
    cases = make_synthetic_corpus(60, seed=1)
    n_test = sum(c.split == "test" for c in cases)
    a = sample_eval_subset(cases, n=5, seed=3)
    assert a == sample_eval_subset(cases, n=5, seed=3)
    assert all(c.split == "test" for c in a)
    assert sample_eval_subset(cases, n=n_test) == [c for c in cases if c.split == "test"]
    with pytest.raises(ValueError):
        sample_eval_subset(cases, n=n_test + 1)


def test_corpus_stats_counts():
    stats = corpus_stats(load_bundled_corpus())
    assert stats.total == 20
    assert sum(stats.per_split.values()) == 20
    assert sum(stats.turn_histogram.values()) == 20
    assert "total cases: 20" in stats.render()


def test_bundled_corpus_matches_generator_and_manifest():
    cases = load_bundled_corpus()
    assert cases == make_synthetic_corpus(20)
    manifest = bundled_manifest()
    assert manifest["sha256"] == hashlib.sha256(bundled_corpus_path().read_bytes()).hexdigest()
    assert manifest["n_cases"] == 20
    assert all(len(c.gold_turns) >= 3 for c in cases)
    assert {c.split for c in cases} == {"train", "test"}


def test_synthetic_diseases_identified_by_answer_pattern():
    patterns = {}
    for case in load_bundled_corpus():
        profile = build_profile(case)
        answered = tuple(
            respond(profile.fresh_copy(), q, []).kind.value == "Normal" for q in TOPIC_QUESTIONS.values()
        )
        patterns.setdefault(case.gold_diagnosis, set()).add(answered)
    assert all(len(p) == 1 for p in patterns.values())
    assert len({next(iter(p)) for p in patterns.values()}) == len(patterns)


def test_gold_turn_validation():
    with pytest.raises(SchemaError):
        ConsultationCase("x", "report", (GoldTurn("", "a"),), "d", "r").validate()
