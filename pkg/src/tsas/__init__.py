"""Test-time self-adaptation of small extractive QA models.

Sample answers under MC dropout, majority-vote them, keep the examples the
samples agree on, and fine-tune on those pseudo-labels.
"""

from tsas.core import (
    AnswerSample,
    FilterConfig,
    PseudoLabeledExample,
    QaExample,
    RunReport,
    SamplingConfig,
    TrainConfig,
    UnlabeledExample,
    VoteResult,
)
from tsas.ensemble import agreement_filter, build_pseudo_dataset, collect_samples, majority_vote
from tsas.metrics import evaluate_set, exact_match, normalize_answer, token_f1
from tsas.pipeline import VARIANTS, RunConfig, run_variant, sweep

__all__ = [
    "AnswerSample",
    "FilterConfig",
    "PseudoLabeledExample",
    "QaExample",
    "RunConfig",
    "RunReport",
    "SamplingConfig",
    "TrainConfig",
    "UnlabeledExample",
    "VARIANTS",
    "VoteResult",
    "agreement_filter",
    "build_pseudo_dataset",
    "collect_samples",
    "evaluate_set",
    "exact_match",
    "majority_vote",
    "normalize_answer",
    "run_variant",
    "sweep",
    "token_f1",
]
