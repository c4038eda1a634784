"""End-to-end runs: evaluate, sample, vote, filter, self-train, re-evaluate."""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

from tsas.backends import DEFAULT_TEMPLATE, Backend, DecodeSpec, TrainRecord, render_prompt
from tsas.core import (
    AnswerSample,
    CapabilityError,
    ConfigError,
    FilterConfig,
    PseudoLabeledExample,
    QaExample,
    RunReport,
    SamplingConfig,
    TrainConfig,
    UnlabeledExample,
    VoteResult,
    strip_golds,
)
from tsas.ensemble import (
    build_pseudo_dataset,
    collect_samples,
    majority_vote,
    soft_vote_targets,
    write_pseudo_dataset,
)
from tsas.metrics import corpus_lexical_diversity, evaluate_set

log = logging.getLogger(__name__)

VARIANTS = (
    "naive",
    "naive_no_ext",
    "greedy_self_adapt",
    "soft_vote",
    "lmsi",
    "tsas",
    "tsas_no_filter",
    "tsas_no_stochastic",
    "finetune_supervised",
)
EVAL_ONLY = frozenset({"naive", "naive_no_ext"})
SWEEP_PARAMS = ("tau", "n_masks")


@dataclass(frozen=True)
class RunConfig:
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    # Test-time adaptation. The learning rate is below the pretraining default:
    # 0.1 made the 5-epoch fine-tune swing by several EM points between shuffles.
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=5, learning_rate=0.03))
    template: str = DEFAULT_TEMPLATE
    grouping: str = "normalized"
    workers: int = 1
    supervised_epochs: int = 1
    # Decode mode of the lmsi baseline; greedy here makes it degenerate to greedy_self_adapt at n=1.
    lmsi_decode_mode: str = "top_k"

    def __post_init__(self) -> None:
        if self.grouping not in ("normalized", "raw"):
            raise ConfigError(f"unknown grouping {self.grouping!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        render_prompt(self.template, "", "")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> RunConfig:
        d = dict(d)
        return cls(
            sampling=SamplingConfig(**d.pop("sampling", {})),
            filter=FilterConfig(**d.pop("filter", {})),
            train=TrainConfig(**d.pop("train", {})) if "train" in d else cls().train,
            **d,
        )


@dataclass
class VariantResult:
    report: RunReport
    pseudo_dataset: list[PseudoLabeledExample]
    predictions_before: dict[str, str]
    predictions_after: dict[str, str]
    samples: dict[str, list[AnswerSample]] = field(default_factory=dict)
    votes: dict[str, VoteResult] = field(default_factory=dict)
    loss_trace: list[float] = field(default_factory=list)


def predict(backend: Backend, examples: Sequence[QaExample | UnlabeledExample], template: str, with_document: bool = True) -> dict[str, str]:
    """Greedy answers keyed by example id."""
    spec = DecodeSpec("greedy")
    out = {}
    for ex in examples:
        prompt = render_prompt(template, ex.document if with_document else "", ex.question)
        out[ex.id] = backend.generate(prompt, spec).text
    return out


def sample_all(
    backend: Backend,
    examples: Sequence[UnlabeledExample],
    cfg: SamplingConfig,
    template: str,
    workers: int = 1,
) -> dict[str, list[AnswerSample]]:
    """Fan sampling out over examples; output order follows ``examples``."""

    def one(ex: UnlabeledExample) -> list[AnswerSample]:
        return collect_samples(backend, ex, cfg, template)

    if workers == 1:
        results = [one(ex) for ex in examples]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, examples))
    return {ex.id: r for ex, r in zip(examples, results)}


def _sampling_for(tag: str, cfg: SamplingConfig, lmsi_mode: str = "top_k") -> SamplingConfig:
    if tag in ("greedy_self_adapt", "tsas_no_stochastic"):
        return replace(cfg, n=1, decode_mode="greedy")
    if tag == "lmsi":
        return replace(cfg, decode_mode=lmsi_mode)
    if tag in ("tsas", "tsas_no_filter"):
        return replace(cfg, decode_mode="mc_dropout")
    return cfg


def _filter_for(tag: str, cfg: FilterConfig) -> FilterConfig:
    if tag == "tsas":
        return replace(cfg, kind="agreement_threshold")
    if tag == "tsas_no_stochastic":
        return replace(cfg, kind="confidence_threshold")
    return FilterConfig(kind="none", tau=cfg.tau)


def execute_variant(
    tag: str,
    backend: Backend,
    test_set: Sequence[QaExample],
    train_set: Sequence[QaExample] | None = None,
    cfg: RunConfig | None = None,
    sample_cache: dict | None = None,
) -> VariantResult:
    """Run one recipe and restore the backend to its starting parameters."""
    cfg = cfg or RunConfig()
    if tag not in VARIANTS:
        raise ConfigError(f"unknown variant {tag!r}; choose from {', '.join(VARIANTS)}")
    trains = tag not in EVAL_ONLY
    if trains and not getattr(backend, "trainable", False):
        raise CapabilityError(f"variant {tag!r} needs a trainable backend")
    if tag == "finetune_supervised":
        if not train_set:
            raise ConfigError("finetune_supervised needs a labeled training set")
        missing = [ex.id for ex in train_set if not ex.gold_answers]
        if missing:
            raise ConfigError(f"training examples without gold answers: {', '.join(missing[:10])}")
    if len(test_set) == 0:
        raise ConfigError("empty test set")

    with_doc = tag != "naive_no_ext"
    before = predict(backend, test_set, cfg.template, with_document=with_doc)
    em_before, f1_before = evaluate_set(before, test_set)
    seeds = {"base_seed": cfg.sampling.base_seed, "train_seed": cfg.train.seed}
    # worker count is an execution detail; reports must not depend on it
    snapshot_cfg = {"variant": tag, **{k: v for k, v in cfg.to_dict().items() if k != "workers"}}
    if not trains:
        report = RunReport(tag, em_before, f1_before, em_before, f1_before, 0, len(test_set), 0.0, 0.0, snapshot_cfg, seeds)
        return VariantResult(report, [], before, dict(before))

    snap = backend.snapshot()  # type: ignore[attr-defined]
    try:
        return _adapt(tag, backend, test_set, train_set, cfg, before, (em_before, f1_before), seeds, snapshot_cfg, sample_cache)
    finally:
        backend.restore(snap)  # type: ignore[attr-defined]


def _adapt(tag, backend, test_set, train_set, cfg: RunConfig, before, scores_before, seeds, snapshot_cfg, sample_cache):
    # Everything up to training sees only the gold-free view.
    unlabeled = strip_golds(list(test_set))
    samples: dict[str, list[AnswerSample]] = {}
    votes: dict[str, VoteResult] = {}
    records: list[TrainRecord] = []
    pseudo: list[PseudoLabeledExample] = []
    train_cfg = cfg.train

    if tag == "finetune_supervised":
        train_cfg = replace(cfg.train, epochs=cfg.supervised_epochs)
        for ex in train_set:
            prompt = render_prompt(cfg.template, ex.document, ex.question)
            records.append(TrainRecord(prompt, ex.gold_answers[0]))
    else:
        scfg = _sampling_for(tag, cfg.sampling, cfg.lmsi_decode_mode)
        key = (scfg, cfg.template, tuple(ex.id for ex in unlabeled))
        if sample_cache is not None and key in sample_cache:
            samples = sample_cache[key]
        else:
            samples = sample_all(backend, unlabeled, scfg, cfg.template, cfg.workers)
            if sample_cache is not None:
                sample_cache[key] = samples
        votes = {ex.id: majority_vote(samples[ex.id], cfg.grouping) for ex in unlabeled}
        if tag == "soft_vote":
            for ex in unlabeled:
                for target, weight in soft_vote_targets(samples[ex.id], cfg.grouping):
                    if target.strip() == "":
                        continue
                    pseudo.append(PseudoLabeledExample(ex.id, ex.question, ex.document, target, float(weight), tag))
        else:
            ordered = [votes[ex.id] for ex in unlabeled]
            pseudo = build_pseudo_dataset(unlabeled, ordered, _filter_for(tag, cfg.filter), tag)
        by_id = {ex.id: ex for ex in unlabeled}
        for p in pseudo:
            ex = by_id[p.example_id]
            weight = p.agreement if tag == "soft_vote" else 1.0
            records.append(TrainRecord(render_prompt(cfg.template, ex.document, ex.question), p.pseudo_label, weight))

    trace = backend.train(records, train_cfg) if records else []
    after = predict(backend, test_set, cfg.template)
    em_after, f1_after = evaluate_set(after, test_set)
    retained = len({p.example_id for p in pseudo}) if tag != "finetune_supervised" else 0
    mean_agreement = sum(v.agreement for v in votes.values()) / len(votes) if votes else 0.0
    diversity = corpus_lexical_diversity(samples[ex.id] for ex in unlabeled) if samples else 0.0
    report = RunReport(
        tag,
        scores_before[0],
        scores_before[1],
        em_after,
        f1_after,
        retained,
        len(test_set),
        mean_agreement,
        diversity,
        snapshot_cfg,
        seeds,
    )
    return VariantResult(report, pseudo, before, after, samples, votes, trace)


def run_variant(
    tag: str,
    backend: Backend,
    test_set: Sequence[QaExample],
    train_set: Sequence[QaExample] | None = None,
    cfg: RunConfig | None = None,
    run_dir: str | Path | None = None,
) -> RunReport:
    cfg = cfg or RunConfig()
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        _write_json(run_dir / "config.json", {"variant": tag, **cfg.to_dict()})
        if hasattr(backend, "save_checkpoint"):
            backend.save_checkpoint(run_dir / "checkpoint_before.npz")
    result = execute_variant(tag, backend, test_set, train_set, cfg)
    if run_dir is not None:
        write_run_dir(run_dir, result)
    return result.report


def sweep(
    parameter: str,
    values: Sequence[float],
    backend: Backend,
    test_set: Sequence[QaExample],
    train_set: Sequence[QaExample] | None = None,
    cfg: RunConfig | None = None,
    variant: str = "tsas",
) -> list[RunReport]:
    """One report per value; samples are reused while the sampling config is unchanged."""
    cfg = cfg or RunConfig()
    if parameter not in SWEEP_PARAMS:
        raise ConfigError(f"unknown sweep parameter {parameter!r}; choose from {', '.join(SWEEP_PARAMS)}")
    if len(values) == 0:
        raise ConfigError("sweep needs at least one value")
    cache: dict = {}
    reports = []
    for v in values:
        if parameter == "tau":
            run_cfg = replace(cfg, filter=replace(cfg.filter, tau=float(v)))
        else:
            run_cfg = replace(cfg, sampling=replace(cfg.sampling, n=int(v)))
        reports.append(execute_variant(variant, backend, test_set, train_set, run_cfg, cache).report)
    return reports


def sweep_rows(parameter: str, values: Sequence[float], reports: Sequence[RunReport]) -> list[dict[str, Any]]:
    return [
        {
            parameter: v,
            "em": round(r.em_after, 4),
            "f1": round(r.f1_after, 4),
            "retention": round(r.retention, 6),
            "mean_agreement": round(r.mean_agreement, 6),
        }
        for v, r in zip(values, reports)
    ]


def sweep_table_csv(rows: Sequence[dict[str, Any]]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def summary_table(reports: Sequence[RunReport]) -> str:
    """Plain-text table with EM/F1 before and after adaptation."""
    header = f"{'variant':<22}{'EM before':>10}{'F1 before':>10}{'EM after':>10}{'F1 after':>10}{'kept':>10}"
    lines = [header, "-" * len(header)]
    for r in reports:
        lines.append(
            f"{r.variant:<22}{r.em_before:>10.2f}{r.f1_before:>10.2f}{r.em_after:>10.2f}"
            f"{r.f1_after:>10.2f}{f'{r.retained}/{r.total}':>10}"
        )
    return "\n".join(lines) + "\n"


def _write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def _write_json(path: Path, obj: Any) -> None:
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_run_dir(run_dir: str | Path, result: VariantResult) -> None:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    write_pseudo_dataset(run_dir / "pseudo_dataset.jsonl", result.pseudo_dataset)
    preds = "".join(
        json.dumps({"id": k, "prediction": v}, ensure_ascii=False) + "\n" for k, v in result.predictions_after.items()
    )
    _write_text(run_dir / "predictions.jsonl", preds)
    _write_json(run_dir / "report.json", result.report.to_dict())
    _write_text(run_dir / "summary.txt", summary_table([result.report]))


def load_report(run_dir: str | Path) -> RunReport:
    with open(Path(run_dir) / "report.json", encoding="utf-8") as f:
        return RunReport.from_dict(json.load(f))
