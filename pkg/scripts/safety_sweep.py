"""Sweep No->Yes noise levels over the shipped corpora and tabulate binary metrics.

    python3 scripts/safety_sweep.py [--seeds 20] [--runs 5] [--levels 0,0.1,0.2,0.3,0.5] [--out sweep.csv]

Yes->No noise stays at 0, so referral recall should read 1.00 at every level
while precision drops as spurious positives accumulate.
"""

import argparse
import csv
import sys

import numpy as np

import guidetree
from guidetree.corpus import load_corpus
from guidetree.evaluation import prf
from guidetree.oracle import NoiseConfig, OracleConfig
from guidetree.runner import run_experiment


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--runs", type=int, default=5)
    ap.add_argument("--levels", default="0,0.1,0.2,0.3,0.5")
    ap.add_argument("--out", help="CSV path (default: stdout)")
    args = ap.parse_args()

    levels = [float(x) for x in args.levels.split(",")]
    manifests = {d: load_corpus(guidetree.corpus_path(d)) for d in guidetree.DOMAINS}
    rows = []
    for d, m in manifests.items():
        for p in levels:
            cfg = OracleConfig("noisy", noise=NoiseConfig(p_no_to_yes=p, p_yes_to_no=0.0))
            prec, rec, fps = [], [], []
            for seed in range(args.seeds):
                for rep in run_experiment(m, cfg, base_seed=seed * 1000, runs=args.runs).reports:
                    pr, rc, _ = prf(rep.binary)
                    prec.append(pr)
                    rec.append(rc)
                    fps.append(rep.binary.fp)
            rows.append([d, p, len(prec), f"{np.mean(prec):.4f}", f"{min(rec):.4f}", f"{np.mean(fps):.2f}"])

    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["domain", "p_no_to_yes", "runs", "mean_precision", "min_recall", "mean_fp"])
    w.writerows(rows)
    if args.out:
        fh.close()
    return 0 if all(float(r[4]) == 1.0 for r in rows) else 1


if __name__ == "__main__":
    sys.exit(main())
