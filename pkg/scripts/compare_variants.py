"""Run every variant from one pretrained checkpoint and print an EM/F1 table.

    python3 scripts/compare_variants.py --seed 0 --out runs/compare
"""

from __future__ import annotations

import argparse
from dataclasses import replace
from pathlib import Path

from tsas.core import SamplingConfig
from tsas.data import SynthSpec, synth
from tsas.pipeline import VARIANTS, RunConfig, run_variant, summary_table
from tsas.toymodel import PRETRAIN, pretrain


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n", type=int, default=15)
    ap.add_argument("--out", default="runs/compare")
    args = ap.parse_args()

    train, test = synth(SynthSpec(seed=args.seed))
    backend = pretrain(train, test, train_cfg=replace(PRETRAIN, seed=args.seed))
    cfg = RunConfig(sampling=SamplingConfig(n=args.n, base_seed=args.seed), train=replace(RunConfig().train, seed=args.seed))
    reports = []
    for tag in VARIANTS:
        reports.append(run_variant(tag, backend, test, train, cfg, run_dir=Path(args.out) / tag))
        print(f"done: {tag}", flush=True)
    table = summary_table(reports)
    (Path(args.out) / "summary.txt").write_text(table)
    print(table)


if __name__ == "__main__":
    main()
