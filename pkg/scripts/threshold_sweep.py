"""Agreement-threshold sweep on the synthetic corpus, written as CSV.

    python3 scripts/threshold_sweep.py --seed 0 --out runs/tau_sweep.csv
"""

from __future__ import annotations

import argparse
from dataclasses import replace
from pathlib import Path

from tsas.core import SamplingConfig
from tsas.data import SynthSpec, synth
from tsas.pipeline import RunConfig, sweep, sweep_rows, sweep_table_csv
from tsas.toymodel import PRETRAIN, pretrain

TAUS = (0.0, 0.3, 0.5, 0.7, 0.9, 1.0)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--values", default=",".join(map(str, TAUS)))
    ap.add_argument("--out", default="runs/tau_sweep.csv")
    args = ap.parse_args()
    values = [float(v) for v in args.values.split(",")]

    train, test = synth(SynthSpec(seed=args.seed))
    backend = pretrain(train, test, train_cfg=replace(PRETRAIN, seed=args.seed))
    cfg = RunConfig(sampling=SamplingConfig(base_seed=args.seed), train=replace(RunConfig().train, seed=args.seed))
    reports = sweep("tau", values, backend, test, cfg=cfg)
    text = sweep_table_csv(sweep_rows("tau", values, reports))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(text)
    print(text, end="")


if __name__ == "__main__":
    main()
