from __future__ import annotations

import hashlib
import json
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from tsas.core import (
    AnswerSample,
    ConfigError,
    FilterConfig,
    LeakageError,
    PseudoLabeledExample,
    QaExample,
    RunReport,
    SamplingConfig,
    TrainConfig,
    derive_sample_seed,
    strip_golds,
)
from tsas.metrics import normalize_answer


def _oracle_seed(base, ex_id, idx):
    raw = hashlib.blake2b(f"{base}\x1f{ex_id}\x1f{idx}".encode(), digest_size=8).digest()
    return int.from_bytes(raw, "big") >> 1


def test_seed_pins():
    assert derive_sample_seed(7, "ex1", 0) == 130590675855681133
    assert derive_sample_seed(7, "ex1", 1) == 5000744433891897282
    assert derive_sample_seed(8, "ex1", 0) == 8114739561327497094
    assert derive_sample_seed(7, "ex1", 0) == derive_sample_seed(7, "ex1", 0)


@given(st.integers(0, 2**40), st.text(max_size=20), st.integers(0, 1000))
def test_seed_matches_oracle(base, ex_id, idx):
    s = derive_sample_seed(base, ex_id, idx)
    assert s == _oracle_seed(base, ex_id, idx)
    assert 0 <= s < 2**63


@given(st.text(max_size=40))
def test_sample_normalized_by_construction(raw):
    assert AnswerSample(raw, "greedy", 0).normalized_text == normalize_answer(raw)


def test_sample_invariants():
    with pytest.raises(ValueError):
        AnswerSample("x", "mc_dropout", 0)
    with pytest.raises(ValueError):
        AnswerSample("x", "top_k", 0, mask_seed=3)
    with pytest.raises(ValueError):
        AnswerSample("x", "greedy", 0, seq_logprob=0.5)
    with pytest.raises(ValueError):
        AnswerSample("x", "beam", 0)


def test_example_validation_and_guard():
    with pytest.raises(ValueError):
        QaExample("a", " ", "doc")
    with pytest.raises(ValueError):
        QaExample("a", "q", "")
    ex = QaExample("a", "q", "doc", ["x"])
    assert ex.gold_answers == ("x",)
    (u,) = strip_golds([ex])
    assert (u.id, u.question, u.document) == ("a", "q", "doc")
    with pytest.raises(LeakageError):
        u.gold_answers
    # the guard also defeats getattr-with-default probing
    with pytest.raises(LeakageError):
        getattr(u, "gold_answers", None)
    with pytest.raises(LeakageError):
        hasattr(u, "gold_answers")


def test_config_invariants():
    for bad in (dict(n=0), dict(decode_mode="beam"), dict(dropout_rate=0.0), dict(dropout_rate=1.0), dict(temperature=0)):
        with pytest.raises(ConfigError):
            SamplingConfig(**bad)
    with pytest.raises(ConfigError):
        FilterConfig(tau=1.5)
    with pytest.raises(ConfigError):
        FilterConfig(kind="entropy")
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    assert FilterConfig(tau=0.7).tau_fraction == Fraction(7, 10)
    assert Fraction(11, 15) >= FilterConfig(tau=0.7).tau_fraction


def test_report_roundtrip_and_bounds():
    r = RunReport("tsas", 10.0, 20.0, 30.0, 40.0, 3, 4, 0.9, 0.1, {"a": 1}, {"base_seed": 0})
    assert r.retention == 0.75
    assert RunReport.from_dict(json.loads(json.dumps(r.to_dict()))) == r
    with pytest.raises(ValueError):
        RunReport("tsas", 10.0, 20.0, 30.0, 40.0, 5, 4, 0.9, 0.1)
    with pytest.raises(ValueError):
        RunReport("tsas", 101.0, 20.0, 30.0, 40.0, 1, 4, 0.9, 0.1)


def test_pseudo_record_fields():
    p = PseudoLabeledExample("e", "q", "d", "sony", 0.8, "tsas")
    rec = p.to_record()
    assert sorted(rec) == ["agreement", "document", "example_id", "pseudo_label", "question", "variant"]
    assert PseudoLabeledExample.from_record(rec) == p
