"""Regenerate the shipped example corpora from their plans.

    python3 scripts/make_corpora.py [--check]

With --check nothing is written; the script exits 1 if a shipped corpus
differs from what the plan produces now.
"""

import argparse
import json
import sys
import tempfile
from pathlib import Path

import guidetree
from guidetree.corpus import GenerationPlan, generate_specs, load_templates, realize, write_corpus
from guidetree.tree import load_tree


def build(domain: str, dest: Path) -> None:
    tree = load_tree(guidetree.tree_path(domain))
    plan = GenerationPlan.from_json(json.loads(guidetree.plan_path(domain).read_text()))
    templates = load_templates(guidetree.templates_path(domain))
    vignettes = [realize(s, templates, plan.seed) for s in generate_specs(tree, plan)]
    write_corpus(dest, f"../trees/{domain}.json", tree, vignettes)


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--check", action="store_true")
    args = ap.parse_args()
    stale = []
    for domain in guidetree.DOMAINS:
        target = guidetree.corpus_path(domain)
        if args.check:
            with tempfile.TemporaryDirectory() as tmp:
                fresh = Path(tmp) / target.name
                build(domain, fresh)
                if not target.is_file() or fresh.read_bytes() != target.read_bytes():
                    stale.append(domain)
        else:
            build(domain, target)
            print(f"wrote {target}")
    if stale:
        print("out of date: " + ", ".join(stale))
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
