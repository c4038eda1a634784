"""Stochastic self-ensembling: sample, vote, filter, build the pseudo-labeled set."""

from __future__ import annotations

import json
import math
import statistics
from collections import Counter
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

from tsas.backends import (
    DEFAULT_TEMPLATE,
    Backend,
    BackendError,
    DecodeSpec,
    render_prompt,
)
from tsas.core import (
    AnswerSample,
    CapabilityError,
    ConfigError,
    FilterConfig,
    PseudoLabeledExample,
    SamplingConfig,
    TsasError,
    UnlabeledExample,
    VoteGroup,
    VoteResult,
    derive_sample_seed,
)


class SamplingError(TsasError):
    def __init__(self, example_id: str, sample_index: int, cause: Exception):
        super().__init__(f"sampling failed for example {example_id!r}, sample {sample_index}: {cause}")
        self.example_id = example_id
        self.sample_index = sample_index
        self.cause = cause


def decode_spec_for(cfg: SamplingConfig, example_id: str, sample_index: int) -> DecodeSpec:
    seed = derive_sample_seed(cfg.base_seed, example_id, sample_index)
    if cfg.decode_mode == "greedy":
        return DecodeSpec("greedy", max_new_tokens=cfg.max_new_tokens)
    if cfg.decode_mode == "top_k":
        return DecodeSpec(
            "top_k",
            top_k=cfg.top_k,
            temperature=cfg.temperature,
            sampling_seed=seed,
            max_new_tokens=cfg.max_new_tokens,
        )
    return DecodeSpec(
        "mc_dropout",
        dropout_rate=cfg.dropout_rate,
        mask_seed=seed,
        max_new_tokens=cfg.max_new_tokens,
    )


def collect_samples(
    backend: Backend,
    example: UnlabeledExample,
    cfg: SamplingConfig,
    template: str = DEFAULT_TEMPLATE,
) -> list[AnswerSample]:
    """Draw ``cfg.n`` answers for one example, one decode per derived seed."""
    if cfg.decode_mode not in backend.capabilities():
        raise CapabilityError(f"backend does not support decode mode {cfg.decode_mode!r}")
    prompt = render_prompt(template, example.document, example.question)
    samples = []
    for j in range(cfg.n):
        spec = decode_spec_for(cfg, example.id, j)
        try:
            gen = backend.generate(prompt, spec)
        except BackendError as exc:
            raise SamplingError(example.id, j, exc) from exc
        samples.append(
            AnswerSample(
                raw_text=gen.text,
                decode_mode=cfg.decode_mode,
                sample_index=j,
                seq_logprob=gen.seq_logprob,
                mask_seed=spec.mask_seed,
            )
        )
    return samples


def _key(sample: AnswerSample, grouping: str) -> str:
    if grouping == "normalized":
        return sample.normalized_text
    if grouping == "raw":
        return sample.raw_text
    raise ConfigError(f"unknown grouping {grouping!r}")


def group_samples(samples: Sequence[AnswerSample], grouping: str = "normalized") -> list[VoteGroup]:
    buckets: dict[str, list[AnswerSample]] = {}
    for s in sorted(samples, key=lambda s: s.sample_index):
        buckets.setdefault(_key(s, grouping), []).append(s)
    return [VoteGroup(k, tuple(v)) for k, v in buckets.items()]


def _mean_logprob(group: VoteGroup) -> float | None:
    lps = [m.seq_logprob for m in group.members]
    if any(lp is None for lp in lps):
        return None
    # fsum keeps the tie-break independent of member order.
    return math.fsum(lps) / len(lps)  # type: ignore[arg-type]


def _representative(group: VoteGroup) -> str:
    counts = Counter(m.raw_text for m in group.members)
    first_idx: dict[str, int] = {}
    for m in group.members:
        first_idx[m.raw_text] = min(first_idx.get(m.raw_text, m.sample_index), m.sample_index)
    return min(counts, key=lambda raw: (-counts[raw], first_idx[raw]))


def majority_vote(samples: Sequence[AnswerSample], grouping: str = "normalized") -> VoteResult:
    """Plurality vote with a deterministic tie-break.

    Ties on count go to the higher mean sequence log-probability, then to
    the lexicographically smallest key.
    """
    if len(samples) == 0:
        raise ValueError("cannot vote over zero samples")
    groups = group_samples(samples, grouping)
    top = max(g.count for g in groups)
    tied = [g for g in groups if g.count == top]
    if len(tied) > 1:
        means = [_mean_logprob(g) for g in tied]
        if all(m is not None for m in means):
            best = max(means)  # type: ignore[type-var]
            tied = [g for g, m in zip(tied, means) if m == best]
    winner = min(tied, key=lambda g: g.key)
    return VoteResult(
        groups=tuple(groups),
        winner_key=winner.key,
        winner_count=winner.count,
        n=len(samples),
        representative_surface=_representative(winner),
    )


def agreement_filter(vote: VoteResult, cfg: FilterConfig) -> bool:
    """True to keep. Empty winning answers are always dropped."""
    if cfg.kind != "agreement_threshold":
        raise ConfigError(f"agreement_filter needs kind='agreement_threshold', got {cfg.kind!r}")
    if vote.winner_key.strip() == "":
        return False
    return vote.agreement_fraction >= cfg.tau_fraction


def confidence_filter(sample: AnswerSample, cfg: FilterConfig) -> bool:
    if cfg.kind != "confidence_threshold":
        raise ConfigError(f"confidence_filter needs kind='confidence_threshold', got {cfg.kind!r}")
    if cfg.confidence_floor is None:
        raise ConfigError("confidence_floor is unresolved; see median_confidence_floor")
    if sample.seq_logprob is None:
        raise CapabilityError("backend does not report log-probabilities; confidence filtering is unavailable")
    return sample.seq_logprob >= cfg.confidence_floor


def median_confidence_floor(samples: Iterable[AnswerSample]) -> float:
    lps = [s.seq_logprob for s in samples]
    if not lps:
        raise ValueError("no samples to take a median over")
    if any(lp is None for lp in lps):
        raise CapabilityError("backend does not report log-probabilities; confidence filtering is unavailable")
    return float(statistics.median(lps))  # type: ignore[type-var]


def _winner_sample(vote: VoteResult) -> AnswerSample:
    group = next(g for g in vote.groups if g.key == vote.winner_key)
    return group.members[0]


def build_pseudo_dataset(
    examples: Sequence[UnlabeledExample],
    votes: Sequence[VoteResult],
    cfg: FilterConfig,
    variant: str = "tsas",
) -> list[PseudoLabeledExample]:
    """Keep the examples whose vote passes ``cfg``; order is preserved."""
    if len(examples) != len(votes):
        raise ValueError(f"{len(examples)} examples but {len(votes)} votes")
    if cfg.kind == "confidence_threshold" and cfg.confidence_floor is None:
        floor = median_confidence_floor(_winner_sample(v) for v in votes)
        cfg = FilterConfig(kind=cfg.kind, tau=cfg.tau, confidence_floor=floor)
    out = []
    for ex, vote in zip(examples, votes):
        if cfg.kind == "agreement_threshold":
            keep = agreement_filter(vote, cfg)
        elif cfg.kind == "confidence_threshold":
            keep = vote.winner_key.strip() != "" and confidence_filter(_winner_sample(vote), cfg)
        else:
            keep = vote.winner_key.strip() != ""
        if keep:
            out.append(
                PseudoLabeledExample(
                    example_id=ex.id,
                    question=ex.question,
                    document=ex.document,
                    pseudo_label=vote.representative_surface,
                    agreement=vote.agreement,
                    source_variant=variant,
                )
            )
    return out


def soft_vote_targets(
    samples: Sequence[AnswerSample], grouping: str = "normalized"
) -> list[tuple[str, Fraction]]:
    """One weighted target per distinct answer; weights are exact vote shares."""
    if len(samples) == 0:
        raise ValueError("cannot build soft targets from zero samples")
    n = len(samples)
    groups = sorted(group_samples(samples, grouping), key=lambda g: (-g.count, g.key))
    return [(_representative(g), Fraction(g.count, n)) for g in groups]


def write_pseudo_dataset(path: str | Path, records: Sequence[PseudoLabeledExample]) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r.to_record(), ensure_ascii=False, sort_keys=True) + "\n")
    tmp.replace(path)


def read_pseudo_dataset(path: str | Path) -> list[PseudoLabeledExample]:
    with open(path, encoding="utf-8") as f:
        return [PseudoLabeledExample.from_record(json.loads(line)) for line in f if line.strip()]
