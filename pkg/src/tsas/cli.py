"""Command-line entry point: ``tsas <command> ...``.

Failures print one line ``error: <Kind>: <message>`` on stderr and exit 1;
usage errors exit 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Any, Sequence

import yaml

from tsas.backends import HttpBackend
from tsas.core import TrainConfig, TsasError
from tsas.data import FORMATS, DatasetFile, IngestStats, SynthSpec, export_jsonl, ingest, load, synth_to_files
from tsas.metrics import MetricError, evaluate_set
from tsas.pipeline import (
    SWEEP_PARAMS,
    VARIANTS,
    RunConfig,
    execute_variant,
    load_report,
    summary_table,
    sweep,
    sweep_rows,
    sweep_table_csv,
    write_run_dir,
    _write_json,
    _write_text,
)
from tsas.toymodel import PRETRAIN, ToyBackend, ToyConfig, load_checkpoint, pretrain

log = logging.getLogger("tsas")

BASE_URL_ENV = "TSAS_BASE_URL"
TOKEN_ENV = "TSAS_API_TOKEN"


def _read_config_file(path: str | None) -> dict[str, Any]:
    if path is None:
        return {}
    text = Path(path).read_text(encoding="utf-8")
    data = json.loads(text) if path.endswith(".json") else yaml.safe_load(text)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise TsasError(f"config file {path} must hold a mapping")
    return data


def effective_config(args: argparse.Namespace) -> dict[str, Any]:
    """Defaults, then the config file, then command-line flags."""
    file_cfg = _read_config_file(args.config)
    run = RunConfig.from_dict(file_cfg.get("run", {}))
    pre = TrainConfig(**{**asdict(PRETRAIN), **file_cfg.get("pretrain", {})})
    toy = ToyConfig(**file_cfg.get("toy", {}))
    train_dropout = float(file_cfg.get("train_dropout", 0.1))

    samp = run.sampling
    filt = run.filter
    if getattr(args, "n", None) is not None:
        samp = replace(samp, n=args.n)
    if getattr(args, "decode_mode", None) is not None:
        samp = replace(samp, decode_mode=args.decode_mode)
    if getattr(args, "dropout_rate", None) is not None:
        samp = replace(samp, dropout_rate=args.dropout_rate)
    if getattr(args, "tau", None) is not None:
        filt = replace(filt, tau=args.tau)
    train = run.train
    if getattr(args, "epochs", None) is not None:
        train = replace(train, epochs=args.epochs)
    if args.seed is not None:
        samp = replace(samp, base_seed=args.seed)
        train = replace(train, seed=args.seed)
        pre = replace(pre, seed=args.seed)
        toy = replace(toy, init_seed=args.seed)
    run = replace(run, sampling=samp, filter=filt, train=train, workers=args.workers or run.workers)
    return {
        "run": run.to_dict(),
        "pretrain": asdict(pre),
        "toy": asdict(toy),
        "train_dropout": train_dropout,
        "backend": getattr(args, "backend", None) or file_cfg.get("backend", "toy"),
    }


def _run_config(eff: dict[str, Any]) -> RunConfig:
    return RunConfig.from_dict(eff["run"])


def _make_backend(args: argparse.Namespace, eff: dict[str, Any], train_set, test_set):
    if eff["backend"] == "http":
        url = args.base_url or os.environ.get(BASE_URL_ENV)
        if not url:
            raise TsasError(f"--backend http needs --base-url or ${BASE_URL_ENV}")
        return HttpBackend(url, token=os.environ.get(TOKEN_ENV))
    if args.checkpoint:
        return ToyBackend(load_checkpoint(args.checkpoint), train_dropout=eff["train_dropout"])
    if not train_set:
        raise TsasError("the toy backend needs --train (labeled) or --checkpoint")
    return pretrain(
        train_set,
        test_set,
        template=eff["run"]["template"],
        toy_cfg=ToyConfig(**eff["toy"]),
        train_cfg=TrainConfig(**eff["pretrain"]),
        dropout_rate=eff["train_dropout"],
    )


def _load_splits(args: argparse.Namespace):
    test_set = load(args.test)
    train_set = load(args.train) if args.train else None
    return train_set, test_set


def cmd_synth(args: argparse.Namespace) -> int:
    spec = SynthSpec(
        num_train=args.num_train,
        num_test=args.num_test,
        shift=not args.no_shift,
        seed=args.seed if args.seed is not None else 0,
    )
    train_path, test_path = synth_to_files(spec, args.out)
    print(json.dumps({"train": str(train_path), "test": str(test_path)}))
    return 0


def cmd_ingest(args: argparse.Namespace) -> int:
    file = DatasetFile(Path(args.input), args.format, args.split) if args.format else DatasetFile.guess(args.input, args.split)
    stats = IngestStats()
    examples = ingest(file, stats)
    export_jsonl(examples, args.out)
    print(json.dumps({"written": len(examples), **asdict(stats)}))
    return 0


def cmd_adapt(args: argparse.Namespace) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    eff = effective_config(args)
    eff["variant"] = args.variant
    _write_json(out / "config.json", eff)
    train_set, test_set = _load_splits(args)
    backend = _make_backend(args, eff, train_set, test_set)
    if hasattr(backend, "save_checkpoint"):
        backend.save_checkpoint(out / "checkpoint_before.npz")
    result = execute_variant(args.variant, backend, test_set, train_set, _run_config(eff))
    write_run_dir(out, result)
    print(json.dumps(result.report.to_dict(), sort_keys=True))
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    eff = effective_config(args)
    eff["variant"] = args.variant
    eff["sweep"] = {"parameter": args.param, "values": args.values}
    _write_json(out / "config.json", eff)
    train_set, test_set = _load_splits(args)
    backend = _make_backend(args, eff, train_set, test_set)
    reports = sweep(args.param, args.values, backend, test_set, train_set, _run_config(eff), args.variant)
    rows = sweep_rows(args.param, args.values, reports)
    _write_text(out / "sweep.csv", sweep_table_csv(rows))
    _write_json(out / "reports.json", [r.to_dict() for r in reports])
    sys.stdout.write(sweep_table_csv(rows))
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    gold = load(args.gold)
    preds: dict[str, str] = {}
    with open(args.pred, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                preds[str(rec["id"])] = str(rec["prediction"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise MetricError(f"{args.pred}:{lineno}: bad prediction record ({exc})") from exc
    em, f1 = evaluate_set(preds, gold)
    print(json.dumps({"em": round(em, 4), "f1": round(f1, 4), "n": len(gold)}))
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    reports = [load_report(d) for d in args.run_dirs]
    sys.stdout.write(summary_table(reports))
    return 0


def _add_run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--test", required=True, help="unlabeled test split (JSONL)")
    p.add_argument("--train", help="labeled split used to pretrain the toy model")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--variant", choices=VARIANTS, default="tsas")
    p.add_argument("--backend", choices=("toy", "http"))
    p.add_argument("--base-url", help=f"HTTP backend URL (default: ${BASE_URL_ENV})")
    p.add_argument("--checkpoint", help="start from a saved toy-model checkpoint instead of pretraining")
    p.add_argument("--n", type=int, help="samples per example")
    p.add_argument("--tau", type=float, help="agreement threshold")
    p.add_argument("--decode-mode", choices=("greedy", "top_k", "mc_dropout"))
    p.add_argument("--dropout-rate", type=float)
    p.add_argument("--epochs", type=int, help="self-training epochs")


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tsas", description="Test-time self-adaptation for small QA models.")
    parser.add_argument("--config", help="YAML or JSON config file")
    parser.add_argument("--seed", type=int, help="seed for sampling, training and model init")
    parser.add_argument("--workers", type=int, help="parallel sampling workers")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write the synthetic shifted corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--num-train", type=int, default=200)
    p.add_argument("--num-test", type=int, default=200)
    p.add_argument("--no-shift", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="convert SQuAD-style JSON or JSONL into canonical JSONL")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=FORMATS)
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("adapt", help="run one variant and write a run directory")
    _add_run_args(p)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("sweep", help="sweep tau or the number of masks")
    _add_run_args(p)
    p.add_argument("--param", choices=SWEEP_PARAMS, required=True)
    p.add_argument("--values", type=_float_list, required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("evaluate", help="EM/F1 of a prediction file")
    p.add_argument("--pred", required=True)
    p.add_argument("--gold", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="summary table over run directories")
    p.add_argument("run_dirs", nargs="+")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.workers is not None and args.workers < 1:
        parser.error("--workers must be >= 1")
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (TsasError, ValueError, OSError, KeyError, yaml.YAMLError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
