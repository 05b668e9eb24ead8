"""Text normalization shared by lexicon lookup, split disjointness, and WER scoring."""

import re

_NON_WORD = re.compile(r"[^\w\s]+")
_WS = re.compile(r"\s+")


def normalize_text(text: str) -> str:
    """Lowercase, strip punctuation, collapse whitespace."""
    text = _NON_WORD.sub(" ", text.casefold())
    return _WS.sub(" ", text).strip()


def normalized_words(text: str) -> list[str]:
    norm = normalize_text(text)
    return norm.split() if norm else []
