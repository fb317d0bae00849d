from __future__ import annotations

from pathlib import Path

import pytest

import guidetree
from guidetree.corpus import load_corpus, load_templates
from guidetree.tree import load_tree

FIXTURES = Path(__file__).parent / "fixtures"

_acceptance: list[tuple[str, str, float]] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if item.path.name != "test_acceptance.py":
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        doc = (getattr(item.function, "__doc__", None) or item.name).strip().splitlines()[0]
        _acceptance.append((doc, rep.outcome, rep.duration))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for doc, outcome, dur in _acceptance:
        tag = {"passed": "PASS", "failed": "FAIL"}.get(outcome, outcome.upper())
        terminalreporter.write_line(f"[{tag}] {doc} ({dur:.2f}s)")


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def shipped_trees():
    return {d: load_tree(guidetree.tree_path(d)) for d in guidetree.DOMAINS}


@pytest.fixture(scope="session")
def shipped_manifests():
    return {d: load_corpus(guidetree.corpus_path(d)) for d in guidetree.DOMAINS}


@pytest.fixture(scope="session")
def shipped_templates():
    return {d: load_templates(guidetree.templates_path(d)) for d in guidetree.DOMAINS}


@pytest.fixture(scope="session")
def five_node():
    return load_tree(guidetree.DATA_DIR / "trees" / "five_node.json")
