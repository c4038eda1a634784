"""Answer normalization and the SQuAD-style EM / token-F1 protocol."""

from __future__ import annotations

import re
import string
import unicodedata
from collections import Counter
from typing import TYPE_CHECKING, Iterable, Mapping, Sequence

if TYPE_CHECKING:
    from tsas.core import AnswerSample, QaExample

_ASCII_PUNCT = frozenset(string.punctuation)
_ARTICLES = re.compile(r"\b(a|an|the)\b", flags=re.UNICODE)


class MetricError(ValueError):
    """Raised when a metric is called outside its contract."""


def _is_punct(ch: str) -> bool:
    # Unicode punctuation (categories P*) is removed along with ASCII punctuation.
    return ch in _ASCII_PUNCT or unicodedata.category(ch).startswith("P")


def normalize_answer(text: str) -> str:
    """Lowercase, drop punctuation and articles, collapse whitespace."""
    text = text.lower()
    text = "".join(ch for ch in text if not _is_punct(ch))
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def answer_tokens(text: str) -> list[str]:
    """Whitespace tokens of the normalized answer."""
    return normalize_answer(text).split()


def _check_golds(golds: Sequence[str]) -> None:
    if isinstance(golds, str):
        raise MetricError("golds must be a list of strings, not a bare string")
    if len(golds) == 0:
        raise MetricError("at least one gold answer is required")


def exact_match(prediction: str, golds: Sequence[str]) -> int:
    _check_golds(golds)
    pred = normalize_answer(prediction)
    return int(any(pred == normalize_answer(g) for g in golds))


def _f1_single(pred_toks: list[str], gold_toks: list[str]) -> float:
    if not pred_toks or not gold_toks:
        return float(pred_toks == gold_toks)
    overlap = sum((Counter(pred_toks) & Counter(gold_toks)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred_toks)
    recall = overlap / len(gold_toks)
    return 2 * precision * recall / (precision + recall)


def token_f1(prediction: str, golds: Sequence[str]) -> float:
    """Max over golds of the multiset token-overlap F1."""
    _check_golds(golds)
    pred_toks = answer_tokens(prediction)
    return max(_f1_single(pred_toks, answer_tokens(g)) for g in golds)


def lexical_diversity(samples: Sequence[AnswerSample]) -> float:
    """Distinct normalized answers divided by the number of samples."""
    if len(samples) == 0:
        raise MetricError("lexical diversity of an empty sample list is undefined")
    return len({s.normalized_text for s in samples}) / len(samples)


def corpus_lexical_diversity(per_example: Iterable[Sequence[AnswerSample]]) -> float:
    """Uniform average of per-example diversity."""
    values = [lexical_diversity(s) for s in per_example]
    if not values:
        raise MetricError("no examples to average over")
    return sum(values) / len(values)


def evaluate_set(
    predictions: Mapping[str, str], dataset: Sequence[QaExample]
) -> tuple[float, float]:
    """Mean EM and F1 over ``dataset`` on the 0-100 scale."""
    if len(dataset) == 0:
        raise MetricError("cannot evaluate an empty dataset")
    em_total = 0.0
    f1_total = 0.0
    for ex in dataset:
        if ex.id not in predictions:
            raise MetricError(f"missing prediction for id {ex.id!r}")
        if not ex.gold_answers:
            raise MetricError(f"example {ex.id!r} has no gold answers")
        pred = predictions[ex.id]
        em_total += exact_match(pred, ex.gold_answers)
        f1_total += token_f1(pred, ex.gold_answers)
    n = len(dataset)
    return 100.0 * em_total / n, 100.0 * f1_total / n
