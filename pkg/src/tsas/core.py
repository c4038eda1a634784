"""Shared value types, configuration records and seed derivation."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Any, Literal

from tsas.metrics import normalize_answer

DecodeMode = Literal["greedy", "top_k", "mc_dropout"]
DECODE_MODES: tuple[str, ...] = ("greedy", "top_k", "mc_dropout")
FilterKind = Literal["agreement_threshold", "confidence_threshold", "none"]
FILTER_KINDS: tuple[str, ...] = ("agreement_threshold", "confidence_threshold", "none")
Grouping = Literal["normalized", "raw"]


class TsasError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(TsasError, ValueError):
    pass


class CapabilityError(TsasError):
    """A backend was asked for something it does not support."""


class LeakageError(TsasError):
    """Gold answers were touched inside an adaptation stage."""


def derive_sample_seed(base_seed: int, example_id: str, sample_index: int) -> int:
    """Stable 63-bit seed for one (example, sample) pair.

    blake2b over a canonical string so the value does not depend on
    PYTHONHASHSEED or platform.
    """
    key = f"{int(base_seed)}\x1f{example_id}\x1f{int(sample_index)}".encode("utf-8")
    digest = hashlib.blake2b(key, digest_size=8).digest()
    return int.from_bytes(digest, "big") >> 1


@dataclass(frozen=True)
class QaExample:
    id: str
    question: str
    document: str
    gold_answers: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("example id must be non-empty")
        if not self.question.strip():
            raise ValueError(f"example {self.id!r}: empty question")
        if not self.document.strip():
            raise ValueError(f"example {self.id!r}: empty document")
        object.__setattr__(self, "gold_answers", tuple(self.gold_answers))

    def unlabeled(self) -> UnlabeledExample:
        return UnlabeledExample(self.id, self.question, self.document)


@dataclass(frozen=True)
class UnlabeledExample:
    """View of a test example with the gold answers removed.

    Any attempt to read ``gold_answers`` raises :class:`LeakageError`.
    """

    id: str
    question: str
    document: str

    @property
    def gold_answers(self) -> tuple[str, ...]:
        raise LeakageError(f"gold answers of {self.id!r} are not visible during adaptation")


def strip_golds(examples: list[QaExample]) -> list[UnlabeledExample]:
    return [ex.unlabeled() for ex in examples]


@dataclass(frozen=True)
class AnswerSample:
    raw_text: str
    decode_mode: str
    sample_index: int
    seq_logprob: float | None = None
    mask_seed: int | None = None
    normalized_text: str = field(init=False)

    def __post_init__(self) -> None:
        if self.decode_mode not in DECODE_MODES:
            raise ValueError(f"unknown decode mode {self.decode_mode!r}")
        if (self.mask_seed is not None) != (self.decode_mode == "mc_dropout"):
            raise ValueError("mask_seed must be set exactly for mc_dropout samples")
        if self.seq_logprob is not None and self.seq_logprob > 1e-12:
            raise ValueError(f"sequence log-probability must be <= 0, got {self.seq_logprob}")
        object.__setattr__(self, "normalized_text", normalize_answer(self.raw_text))


@dataclass(frozen=True)
class VoteGroup:
    key: str
    members: tuple[AnswerSample, ...]

    @property
    def count(self) -> int:
        return len(self.members)

    def mean_logprob(self) -> float | None:
        lps = [m.seq_logprob for m in self.members]
        if any(lp is None for lp in lps):
            return None
        return sum(lps) / len(lps)  # type: ignore[arg-type]


@dataclass(frozen=True)
class VoteResult:
    groups: tuple[VoteGroup, ...]
    winner_key: str
    winner_count: int
    n: int
    representative_surface: str

    @property
    def agreement_fraction(self) -> Fraction:
        return Fraction(self.winner_count, self.n)

    @property
    def agreement(self) -> float:
        return self.winner_count / self.n


@dataclass(frozen=True)
class PseudoLabeledExample:
    example_id: str
    question: str
    document: str
    pseudo_label: str
    agreement: float
    source_variant: str

    def to_record(self) -> dict[str, Any]:
        return {
            "example_id": self.example_id,
            "question": self.question,
            "document": self.document,
            "pseudo_label": self.pseudo_label,
            "agreement": self.agreement,
            "variant": self.source_variant,
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> PseudoLabeledExample:
        return cls(
            example_id=rec["example_id"],
            question=rec["question"],
            document=rec["document"],
            pseudo_label=rec["pseudo_label"],
            agreement=float(rec["agreement"]),
            source_variant=rec["variant"],
        )


@dataclass(frozen=True)
class SamplingConfig:
    n: int = 15
    decode_mode: str = "mc_dropout"
    dropout_rate: float = 0.1
    top_k: int = 40
    temperature: float = 0.7
    base_seed: int = 0
    max_new_tokens: int = 16

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ConfigError(f"n must be >= 1, got {self.n}")
        if self.decode_mode not in DECODE_MODES:
            raise ConfigError(f"unknown decode mode {self.decode_mode!r}")
        if not 0.0 < self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in (0, 1), got {self.dropout_rate}")
        if self.top_k < 1:
            raise ConfigError(f"top_k must be >= 1, got {self.top_k}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.max_new_tokens < 1:
            raise ConfigError(f"max_new_tokens must be >= 1, got {self.max_new_tokens}")


@dataclass(frozen=True)
class FilterConfig:
    kind: str = "agreement_threshold"
    tau: float = 0.7
    # None means: use the median sequence log-probability of the run.
    confidence_floor: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in FILTER_KINDS:
            raise ConfigError(f"unknown filter kind {self.kind!r}")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"tau must lie in [0, 1], got {self.tau}")

    @property
    def tau_fraction(self) -> Fraction:
        # limit_denominator recovers 7/10 from the binary float 0.7.
        return Fraction(self.tau).limit_denominator(10**6)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    learning_rate: float = 0.1
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass(frozen=True)
class RunReport:
    variant: str
    em_before: float
    f1_before: float
    em_after: float
    f1_after: float
    retained: int
    total: int
    mean_agreement: float
    lexical_diversity: float
    config: dict[str, Any] = field(default_factory=dict)
    seeds: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not 0 <= self.retained <= self.total:
            raise ValueError(f"retained={self.retained} outside [0, {self.total}]")
        for name in ("em_before", "f1_before", "em_after", "f1_after"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"{name}={v} outside [0, 100]")

    @property
    def retention(self) -> float:
        return self.retained / self.total if self.total else 0.0

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> RunReport:
        return cls(**d)
