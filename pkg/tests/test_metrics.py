from __future__ import annotations

import time

import pytest
from hypothesis import given
from hypothesis import strategies as st

from tsas.core import AnswerSample, QaExample
from tsas.metrics import (
    MetricError,
    corpus_lexical_diversity,
    evaluate_set,
    exact_match,
    lexical_diversity,
    normalize_answer,
    token_f1,
)

# (prediction, golds, EM, F1 on 0-1), computed by hand
GOLDENS = [
    ("sony music", ["sony"], 0, 2 / 3),
    ("Sony", ["sony"], 1, 1.0),
    ("The Beatles!", ["beatles"], 1, 1.0),
    ("an apple pie", ["apple pie", "pie"], 1, 1.0),
    ("new york city", ["new york"], 0, 0.8),
    ("paris", ["london"], 0, 0.0),
    ("a a b", ["a b"], 1, 1.0),
    ("x x y", ["x y"], 0, 0.8),
    ("b b c", ["b c c"], 0, 2 / 3),
    ("", ["x"], 0, 0.0),
    ("the", [""], 1, 1.0),
    ("“Madrid”", ["madrid"], 1, 1.0),
    ("1,000", ["1000"], 1, 1.0),
]


@pytest.mark.parametrize("pred,golds,em,f1", GOLDENS)
def test_goldens(pred, golds, em, f1):
    assert exact_match(pred, golds) == em
    assert token_f1(pred, golds) == pytest.approx(f1, abs=1e-12)


def test_set_scale_and_runtime():
    t0 = time.perf_counter()
    data = [QaExample(f"e{i}", "q?", "doc", (g[0] if g[0] else "x",)) for i, g in enumerate([["sony"], ["paris"], ["new york"]])]
    preds = {"e0": "sony music", "e1": "paris", "e2": "new york city"}
    em, f1 = evaluate_set(preds, data)
    assert em == pytest.approx(100 / 3)
    assert f1 == pytest.approx(100 * (2 / 3 + 1 + 0.8) / 3)
    assert round(100 * token_f1("sony music", ["sony"]), 2) == 66.67
    assert time.perf_counter() - t0 < 1.0


def test_normalize_examples():
    assert normalize_answer("  The  Quick, brown fox. ") == "quick brown fox"
    assert normalize_answer("theatre") == "theatre"
    assert normalize_answer("A¿B¡C") == "abc"


def test_contract_errors():
    with pytest.raises(MetricError):
        exact_match("x", [])
    with pytest.raises(MetricError):
        token_f1("x", "x")
    with pytest.raises(MetricError):
        evaluate_set({}, [])
    with pytest.raises(MetricError):
        evaluate_set({}, [QaExample("a", "q", "d", ("x",))])
    with pytest.raises(MetricError):
        evaluate_set({"a": "x"}, [QaExample("a", "q", "d")])
    with pytest.raises(MetricError):
        lexical_diversity([])


def test_lexical_diversity():
    s = [AnswerSample(t, "top_k", i) for i, t in enumerate(["Paris", "paris.", "the paris", "London"])]
    assert lexical_diversity(s) == 0.5
    assert corpus_lexical_diversity([s, s[:1]]) == 0.75


text = st.text(alphabet=st.characters(blacklist_categories=("Cs",)), max_size=30)


@given(text)
def test_normalize_idempotent(s):
    assert normalize_answer(normalize_answer(s)) == normalize_answer(s)


@given(text, st.lists(text, min_size=1, max_size=4))
def test_f1_bounds_and_em_implies_f1(pred, golds):
    f1 = token_f1(pred, golds)
    assert 0.0 <= f1 <= 1.0
    if exact_match(pred, golds):
        assert f1 == 1.0


@given(text, text)
def test_f1_symmetric(a, b):
    assert token_f1(a, [b]) == pytest.approx(token_f1(b, [a]))


@given(text, st.lists(text, min_size=1, max_size=4))
def test_gold_order_irrelevant(pred, golds):
    assert token_f1(pred, golds) == token_f1(pred, golds[::-1])
    assert exact_match(pred, golds) == exact_match(pred, golds[::-1])
