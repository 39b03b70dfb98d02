from __future__ import annotations

from hypothesis import given, strategies as st

from consult_rl.text import content_words, extract_tag, jaccard, normalize, split_clauses, tokenize


def test_normalize_strips_punctuation_and_case():
    assert normalize("Hello, World!") == "hello world"
    assert tokenize("  It's  X-ray. ") == ["its", "xray"]


def test_content_words_drop_stopwords():
    assert content_words("Do you have a fever?") == frozenset({"fever"})
    assert content_words("How long have you had these symptoms?") == frozenset({"long", "symptoms"})


def test_stripped_contractions():
    assert content_words("I don't, dont I'm") == frozenset()
    # "ill" must survive as a symptom word even though "i'll" strips to it.
    assert content_words("I feel ill") == frozenset({"feel", "ill"})


def test_jaccard_edge_cases():
    assert jaccard(frozenset(), frozenset()) == 1.0
    assert jaccard(frozenset({"a"}), frozenset()) == 0.0
    assert jaccard(frozenset({"a", "b"}), frozenset({"b", "c"})) == 1 / 3


@given(st.frozensets(st.sampled_from("abcdef")), st.frozensets(st.sampled_from("abcdef")))
def test_jaccard_symmetric_and_bounded(a, b):
    j = jaccard(a, b)
    assert j == jaccard(b, a)
    assert 0.0 <= j <= 1.0


def test_split_clauses():
    assert split_clauses("I have a headache, and I feel sick. It started today.") == [
        "I have a headache",
        "I feel sick.",
        "It started today.",
    ]


def test_extract_tag():
    assert extract_tag("<think>x</think><answer> y </answer>", "answer") == " y "
    assert extract_tag("<answer>unclosed", "answer") is None
    assert extract_tag("<ANSWER>a</ANSWER>", "answer") == "a"
