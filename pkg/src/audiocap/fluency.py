"""Pluggable caption fluency detection with a rule-based default.

The default detector flags three cheap disfluency signals: immediate word
repetition, absence of any verb-like token, and sentences that end on a
dangling function word. Heavier classifier-based detectors can be dropped in
behind the same interface.
"""

from __future__ import annotations

from typing import Protocol

from .data import CaptionText, normalize_caption


class FluencyDetector(Protocol):
    def is_fluent(self, text: str | CaptionText) -> bool: ...


_AUX_VERBS = {
    "is", "are", "was", "were", "be", "being", "been",
    "has", "have", "had", "can", "could", "will", "would",
}

_DANGLING_ENDINGS = {
    "a", "an", "the", "and", "or", "but", "of", "with", "to", "in", "on",
    "at", "as", "by", "for", "from", "into", "over", "under", "while",
    "during", "their", "its", "his", "her", "very", "some", "then",
    "is", "are", "was", "were",
}

_VERB_SUFFIXES = ("ing", "ed", "s")


def _verb_like(word: str) -> bool:
    if word in _AUX_VERBS:
        return True
    return len(word) > 2 and word.endswith(_VERB_SUFFIXES)


class RuleBasedFluencyDetector:
    """Flags immediate repetition, missing verb-like token, truncated ending."""

    def is_fluent(self, text: str | CaptionText) -> bool:
        normalized = text.text if isinstance(text, CaptionText) else normalize_caption(text)
        words = normalized.split()
        if not words:
            return False
        for first, second in zip(words, words[1:]):
            if first == second:
                return False
        if not any(_verb_like(w) for w in words):
            return False
        if words[-1] in _DANGLING_ENDINGS:
            return False
        return True
