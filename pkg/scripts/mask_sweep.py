"""Vary the number of dropout masks per example; reports EM, retention and diversity.

    python3 scripts/mask_sweep.py --seed 0 --values 1,3,5,10,15,20
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace

from tsas.core import SamplingConfig
from tsas.data import SynthSpec, synth
from tsas.pipeline import RunConfig, sweep
from tsas.toymodel import PRETRAIN, pretrain


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--values", default="1,3,5,10,15,20")
    args = ap.parse_args()
    values = [int(v) for v in args.values.split(",")]

    train, test = synth(SynthSpec(seed=args.seed))
    backend = pretrain(train, test, train_cfg=replace(PRETRAIN, seed=args.seed))
    cfg = RunConfig(sampling=SamplingConfig(base_seed=args.seed), train=replace(RunConfig().train, seed=args.seed))
    reports = sweep("n_masks", values, backend, test, cfg=cfg)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["n_masks", "em_before", "em_after", "retention", "mean_agreement", "lexical_diversity"])
    for n, r in zip(values, reports):
        w.writerow([n, r.em_before, r.em_after, f"{r.retention:.4f}", f"{r.mean_agreement:.4f}", f"{r.lexical_diversity:.4f}"])


if __name__ == "__main__":
    main()
