"""Early-termination experiment: always-yes answers against gold path lengths.

    python3 scripts/traversal_experiment.py [--out traversal.csv]

Prints per-domain summaries grouped by gold path length (n, mean, quartiles)
and optionally writes the per-vignette differences as CSV.
"""

import argparse
import sys

import guidetree
from guidetree.corpus import load_corpus
from guidetree.engine import gold_trace, traverse
from guidetree.evaluation import traversal_distribution
from guidetree.oracle import ConstantOracle


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", help="write domain,gold_steps,vignette_id,difference rows here")
    args = ap.parse_args()

    lines = ["domain,gold_steps,vignette_id,difference"]
    for d in guidetree.DOMAINS:
        m = load_corpus(guidetree.corpus_path(d))
        pairs = []
        for v in m.vignettes:
            _, pred = traverse(m.tree, ConstantOracle(True), vignette_id=v.id)
            pairs.append((pred, gold_trace(m.tree, v.features, v.id)))
        dist = traversal_distribution(pairs)
        print(f"{d}")
        print("  gold_steps     n    mean    min     q1 median     q3    max")
        for g in dist.groups.values():
            print(f"  {g.gold_steps:10d} {g.n:5d} {g.mean:7.2f} {g.min:6d} {g.q1:6.1f} {g.median:6.1f} {g.q3:6.1f} {g.max:6d}")
        lines += [f"{d},{s},{vid},{diff}" for s, vid, diff in dist.rows]
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
