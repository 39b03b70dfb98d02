"""Text normalization shared by the patient simulator and the reward scorer."""

from __future__ import annotations

import re
import string
from functools import lru_cache

STOPWORDS_VERSION = "1"

# Fixed English list. Bump STOPWORDS_VERSION on any edit: patient matching depends on it.
# Contractions whose stripped form is a content word ("i'll" -> "ill") are left out.
STOPWORDS = frozenset(
    """
    a about above after again against all am an and any are aren't as at be because been
    before being below between both but by can can't cannot could couldn't did didn't do
    does doesn't doing don't down during each either ever few for from further had hadn't
    has hasn't have haven't having he he's her here here's hers herself him
    himself his how how's i i'm i've if in into is isn't it it's its itself just
    me more most much mustn't my myself no nor not now of off on once only or other
    ought our ours ourselves out over own please same shan't she she's should
    shouldn't so some such than that that's the their theirs them themselves then there
    there's these they they'd they'll they're they've this those through to too under
    until up very was wasn't we we're we've were weren't what what's when
    when's where where's which while who who's whom why why's will with won't would
    wouldn't you you'd you'll you're you've your yours yourself yourselves any anything
    also been get got has yes okay ok tell like
    """.split()
)

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)
_STOP_STRIPPED = frozenset(w.translate(_PUNCT_TABLE) for w in STOPWORDS)


def normalize(text: str) -> str:
    """Lowercase and delete ASCII punctuation."""
    return text.lower().translate(_PUNCT_TABLE)


def tokenize(text: str) -> list[str]:
    return normalize(text).split()


@lru_cache(maxsize=65536)
def content_words(text: str) -> frozenset[str]:
    """Normalized word set with stop-words removed.

    Stop-words are compared after punctuation stripping, so "don't" and "dont"
    are both dropped.
    """
    return frozenset(w for w in tokenize(text) if w not in _STOP_STRIPPED)


def jaccard(a: frozenset[str] | set[str], b: frozenset[str] | set[str]) -> float:
    if not a and not b:
        return 1.0
    union = len(a | b)
    return len(a & b) / union


_SENTENCE_SPLIT = re.compile(r"(?<=[.!?;])\s+|,\s*(?:and\s+)?")


def split_clauses(text: str) -> list[str]:
    """Split a self-report into clauses on sentence punctuation and commas."""
    parts = [p.strip(" ,;") for p in _SENTENCE_SPLIT.split(text)]
    return [p for p in parts if p and content_words(p)]


def extract_tag(text: str, tag: str) -> str | None:
    """Content of the first ``<tag>...</tag>`` block, or None if absent or unclosed."""
    m = re.search(rf"<{tag}>(.*?)</{tag}>", text, flags=re.DOTALL | re.IGNORECASE)
    return m.group(1) if m else None
