"""Executable guidance trees for guideline-driven triage, with oracle-driven
traversal, audit traces, synthetic vignette corpora and evaluation."""

from pathlib import Path

__version__ = "0.1.0"

DATA_DIR = Path(__file__).parent / "data"
DOMAINS = ("headache", "low_back_pain", "prostate_cancer")


def tree_path(name: str) -> Path:
    return DATA_DIR / "trees" / f"{name}.json"


def corpus_path(name: str) -> Path:
    return DATA_DIR / "corpora" / f"{name}.jsonl"


def templates_path(name: str) -> Path:
    return DATA_DIR / "templates" / f"{name}.json"


def plan_path(name: str) -> Path:
    return DATA_DIR / "plans" / f"{name}.json"
