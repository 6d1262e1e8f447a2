"""Answer extraction, normalization, and self-consistency voting.

Normalization canonicalizes answer strings so that exact-match comparison is
insensitive to surface form. Two flavours exist, selected by the question's
task kind:

* ``textual``: lowercase, drop punctuation, drop articles (a/an/the), collapse
  whitespace.
* ``math``: strip currency symbols and thousands separators; when the string
  reduces to a single number with at most a unit suffix, keep the number in
  canonical form (no trailing zeros after the decimal point, no leading
  zeros); otherwise apply a gentle cleanup that preserves decimals.

Both flavours are idempotent: ``normalize(normalize(x)) == normalize(x)``.
"""

from __future__ import annotations

import re
import string
from collections import Counter
from typing import Sequence

from .errors import ExtractionError, PreconditionError

TASK_KINDS = ("textual", "math")

_PUNCT = set(string.punctuation)
_ARTICLES_RE = re.compile(r"\b(a|an|the)\b")
_CURRENCY_RE = re.compile(r"[$€£¥]")
_THOUSANDS_RE = re.compile(r"(?<=\d),(?=\d)")
# a single number, optionally followed by a % sign or a short unit phrase
_NUMBER_WITH_UNIT_RE = re.compile(
    r"([+-]?(?:\d+(?:\.\d*)?|\.\d+))\s*(?:%|[a-z°²³][a-z°²³.]*(?:\s+[a-z°²³][a-z°²³.]*)*)?\s*\.?"
)
_ANSWER_MARKER_RE = re.compile(
    r"(?:final\s+answer|answer)\s*(?:is|:|=)\s*", re.IGNORECASE
)
_NUMBER_TOKEN_RE = re.compile(r"[-+]?\$?\d[\d,]*(?:\.\d+)?%?")
_SENTENCE_SPLIT_RE = re.compile(r"[.!?\n]+")


def _canonical_number(token: str) -> str:
    sign = ""
    if token[0] in "+-":
        sign, token = token[0], token[1:]
    int_part, _, frac = token.partition(".")
    frac = frac.rstrip("0")
    int_part = str(int(int_part)) if int_part else "0"
    out = int_part + (f".{frac}" if frac else "")
    if sign == "-" and out not in ("0", "0.0"):
        out = "-" + out
    return out


def _normalize_textual(text: str) -> str:
    text = text.lower()
    text = "".join(ch for ch in text if ch not in _PUNCT)
    text = _ARTICLES_RE.sub(" ", text)
    return " ".join(text.split())


def _normalize_math(text: str) -> str:
    text = text.strip().lower()
    text = _CURRENCY_RE.sub("", text)
    text = _THOUSANDS_RE.sub("", text)
    text = " ".join(text.split())
    match = _NUMBER_WITH_UNIT_RE.fullmatch(text)
    if match:
        return _canonical_number(match.group(1))
    # not a bare number: gentle cleanup that keeps decimal points intact
    return text.rstrip(" .")


def normalize(answer: str, task_kind: str = "textual") -> str:
    """Canonicalize an answer string for exact-match comparison.

    Total and idempotent; never raises for string input.
    """
    if task_kind == "math":
        return _normalize_math(answer)
    return _normalize_textual(answer)


def extract_answer(text: str, task_kind: str = "textual") -> str:
    """Pull the final answer out of a completion and normalize it.

    Preference order: the last explicit ``answer is`` / ``final answer:``
    marker, then (math) the last numeric token, then (textual) the last
    sentence. The result is always a fixed point of :func:`normalize`.

    Raises:
        ExtractionError: blank input, or nothing extractable.
    """
    if not text or not text.strip():
        raise ExtractionError("empty completion", raw=text or "")

    marker_ends = [m.end() for m in _ANSWER_MARKER_RE.finditer(text)]
    if marker_ends:
        value = text[marker_ends[-1] :].splitlines()[0].strip()
        normalized = normalize(value, task_kind)
        if normalized:
            return normalized

    if task_kind == "math":
        numbers = _NUMBER_TOKEN_RE.findall(text)
        if numbers:
            normalized = normalize(numbers[-1], task_kind)
            if normalized:
                return normalized
    else:
        sentences = [s.strip() for s in _SENTENCE_SPLIT_RE.split(text) if s.strip()]
        if sentences:
            normalized = normalize(sentences[-1], task_kind)
            if normalized:
                return normalized

    raise ExtractionError("no extractable answer", raw=text)


def majority_vote(answers: Sequence[str]) -> tuple[str, int]:
    """Return the modal answer and its vote count.

    Ties break toward the answer whose first occurrence comes earliest in the
    list, so the result is deterministic and order-stable.
    """
    if not answers:
        raise PreconditionError("majority_vote requires at least one answer")
    counts = Counter(answers)
    best = max(counts, key=lambda a: (counts[a], -answers.index(a)))
    return best, counts[best]
