"""Tree traversal with a complete audit trace.

One step is recorded per node visited.  A multi-criteria node is a single
step carrying one question per criterion; every criterion is asked, there
is no short-circuit once the threshold is reached.
"""

from __future__ import annotations

import json
import threading
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, TextIO

from .oracle import Answer, Oracle, OracleError, Question, ReplayOracle, ScriptedOracle
from .tree import GuidanceTree, MultiNode, SimpleNode, Target


@dataclass(frozen=True)
class Outcome:
    action_id: str | None
    referral: bool = False

    @property
    def is_action(self) -> bool:
        return self.action_id is not None

    def to_json(self) -> dict[str, Any]:
        if self.action_id is None:
            return {"kind": "no_action", "action_id": None, "referral": False}
        return {"kind": "action", "action_id": self.action_id, "referral": self.referral}

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> Outcome:
        return cls(d.get("action_id"), bool(d.get("referral", False)))


NO_ACTION = Outcome(None, False)


@dataclass(frozen=True)
class Step:
    index: int
    node_id: str
    kind: str
    questions: tuple[Question, ...]
    answers: tuple[Answer, ...]
    branch: str
    target: Target

    def to_json(self) -> dict[str, Any]:
        return {
            "index": self.index,
            "node_id": self.node_id,
            "kind": self.kind,
            "questions": [q.to_json() for q in self.questions],
            "answers": [a.to_json() for a in self.answers],
            "branch": self.branch,
            "target": self.target.to_json(),
        }

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> Step:
        (kind, ref), = d["target"].items()
        return cls(
            d["index"],
            d["node_id"],
            d["kind"],
            tuple(Question.from_json(q) for q in d["questions"]),
            tuple(Answer.from_json(a) for a in d["answers"]),
            d["branch"],
            Target(kind, ref if isinstance(ref, str) else None),
        )


@dataclass
class Trace:
    tree_domain: str
    vignette_id: str
    oracle_descriptor: dict[str, Any]
    steps: list[Step] = field(default_factory=list)
    outcome: Outcome | None = None
    aborted: bool = False
    error: str | None = None

    @property
    def step_count(self) -> int:
        return len(self.steps)

    @property
    def query_count(self) -> int:
        return sum(len(s.questions) for s in self.steps)

    def qa_pairs(self) -> Iterator[tuple[Question, Answer]]:
        for s in self.steps:
            yield from zip(s.questions, s.answers)

    def to_json(self) -> dict[str, Any]:
        return {
            "vignette_id": self.vignette_id,
            "tree_domain": self.tree_domain,
            "oracle_descriptor": self.oracle_descriptor,
            "steps": [s.to_json() for s in self.steps],
            "outcome": self.outcome.to_json() if self.outcome else None,
            "step_count": self.step_count,
            "query_count": self.query_count,
            "aborted": self.aborted,
            "error": self.error,
        }

    def to_jsonl(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> Trace:
        trace = cls(
            d["tree_domain"],
            d["vignette_id"],
            dict(d["oracle_descriptor"]),
            [Step.from_json(s) for s in d["steps"]],
            Outcome.from_json(d["outcome"]) if d.get("outcome") else None,
            bool(d.get("aborted", False)),
            d.get("error"),
        )
        if d.get("step_count", trace.step_count) != trace.step_count:
            raise ValueError(f"trace {trace.vignette_id}: step_count disagrees with steps")
        return trace


class TraversalAborted(Exception):
    """Raised when the oracle fails mid-traversal; ``trace`` holds the partial record."""

    def __init__(self, trace: Trace, cause: Exception):
        self.trace = trace
        self.cause = cause
        super().__init__(f"traversal of {trace.vignette_id} aborted: {cause}")


class StepLimitExceeded(RuntimeError):
    pass


class MismatchedVignette(ValueError):
    pass


def traverse(
    tree: GuidanceTree,
    oracle: Oracle,
    *,
    vignette_id: str = "",
    max_steps: int | None = None,
    descriptor: dict[str, Any] | None = None,
) -> tuple[Outcome, Trace]:
    """Walk ``tree`` from the root, asking ``oracle`` at each node.

    The tree is assumed to have passed :func:`validate_tree`.
    """
    limit = len(tree.nodes) if max_steps is None else max_steps
    trace = Trace(tree.domain, vignette_id, descriptor or oracle.descriptor())
    nid = tree.root
    while True:
        if trace.step_count >= limit:
            raise StepLimitExceeded(f"more than {limit} steps from {tree.root!r}")
        node = tree.nodes[nid]
        if isinstance(node, SimpleNode):
            questions = (Question(node.feature, node.question, nid),)
        else:
            questions = tuple(
                Question(c.feature, c.question, nid, i) for i, c in enumerate(node.criteria)
            )
        answers = []
        try:
            for q in questions:
                answers.append(oracle.ask(q))
        except OracleError as exc:
            trace.aborted = True
            trace.error = f"{type(exc).__name__}: {exc}"
            raise TraversalAborted(trace, exc) from exc
        if isinstance(node, SimpleNode):
            branch, target = ("yes", node.on_yes) if answers[0].value else ("no", node.on_no)
        else:
            met = sum(a.value for a in answers) >= node.threshold
            branch, target = ("met", node.on_met) if met else ("not_met", node.on_not_met)
        trace.steps.append(Step(trace.step_count, nid, node.kind, questions, tuple(answers), branch, target))
        if target.kind == "node":
            nid = target.ref
            continue
        if target.kind == "action":
            outcome = Outcome(target.ref, tree.actions[target.ref].referral)
        else:
            outcome = NO_ACTION
        trace.outcome = outcome
        return outcome, trace


def gold_trace(tree: GuidanceTree, features: Mapping[str, bool], vignette_id: str = "") -> Trace:
    """Traversal under a perfect oracle over the gold features (the optimal path)."""
    oracle = ScriptedOracle(features, policy="no", backend="gold")
    _, trace = traverse(tree, oracle, vignette_id=vignette_id)
    return trace


def replay(tree: GuidanceTree, trace: Trace) -> tuple[Outcome, Trace]:
    """Re-run a recorded traversal from its answers alone."""
    oracle = ReplayOracle(list(trace.qa_pairs()))
    return traverse(tree, oracle, vignette_id=trace.vignette_id, descriptor=trace.oracle_descriptor)


def traversal_difference(predicted: Trace, gold: Trace) -> int:
    if predicted.vignette_id != gold.vignette_id or predicted.tree_domain != gold.tree_domain:
        raise MismatchedVignette(
            f"{predicted.tree_domain}/{predicted.vignette_id} vs {gold.tree_domain}/{gold.vignette_id}"
        )
    return predicted.step_count - gold.step_count


def took_positive_branch(trace: Trace) -> bool:
    return any(s.branch in ("yes", "met") for s in trace.steps)


# ---------------------------------------------------------------------------
# JSONL trace log
# ---------------------------------------------------------------------------


class TraceWriter:
    """Serialized JSONL writer; safe to share between worker threads."""

    def __init__(self, fh: TextIO):
        self.fh = fh
        self.lock = threading.Lock()

    def write(self, trace: Trace) -> None:
        line = trace.to_jsonl() + "\n"
        with self.lock:
            self.fh.write(line)


def write_traces(path: str | Path, traces: Iterable[Trace]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        w = TraceWriter(fh)
        for t in traces:
            w.write(t)


def read_traces(path: str | Path) -> list[Trace]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(Trace.from_json(json.loads(line)))
    return out


def render_trace(trace: Trace) -> str:
    """Human-readable step-by-step audit listing."""
    lines = [f"vignette {trace.vignette_id} | tree {trace.tree_domain} | oracle {trace.oracle_descriptor.get('backend')}"]
    for s in trace.steps:
        lines.append(f"step {s.index}: {s.node_id} ({s.kind})")
        for q, a in zip(s.questions, s.answers):
            ans = "yes" if a.value else "no"
            extra = f"  [raw: {a.raw!r}]" if a.raw is not None and a.raw.strip().lower() not in ("yes", "no", "y", "n") else ""
            lines.append(f"    Q: {q.text}\n    A: {ans}{extra}")
        lines.append(f"    -> branch {s.branch}, go to {s.target}")
    if trace.aborted:
        lines.append(f"ABORTED: {trace.error}")
    elif trace.outcome is not None:
        o = trace.outcome
        lines.append("outcome: " + (f"action {o.action_id} (referral={o.referral})" if o.is_action else "no action"))
    lines.append(f"steps: {trace.step_count}, queries: {trace.query_count}")
    return "\n".join(lines)
