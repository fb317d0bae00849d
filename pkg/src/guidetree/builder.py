"""Guideline text to guidance tree: segment, prompt, parse replies, merge.

Model calls are pluggable; the pipeline only needs a function mapping a
prompt to a reply, so recorded replies work the same as a live endpoint.
"""

from __future__ import annotations

import json
import math
import re
from collections.abc import Callable, Sequence
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

from . import tree as T
from .tree import (
    ActionDef,
    GuidanceTree,
    Issue,
    MultiNode,
    ParseIssue,
    SimpleNode,
    Target,
    TreeParseError,
    parse_tree,
    serialize_tree,
    validate_tree,
)

TEMPLATE_VERSION = "tree-prompt/1"


class BuildError(Exception):
    pass


class ParagraphExceedsBudget(BuildError):
    def __init__(self, span: tuple[int, int], estimate: int, budget: int):
        self.span = span
        self.estimate = estimate
        self.budget = budget
        super().__init__(f"paragraph at bytes {span[0]}..{span[1]} needs ~{estimate} tokens, budget is {budget}")


class Unparseable(BuildError):
    def __init__(self, segment_index: int, reason: str):
        self.segment_index = segment_index
        super().__init__(f"segment {segment_index}: {reason}")


class SchemaViolation(BuildError):
    """Reply parsed as JSON but is not a usable subtree."""

    def __init__(self, segment_index: int, issues: Sequence[Issue | ParseIssue]):
        self.segment_index = segment_index
        self.issues = list(issues)
        super().__init__(f"segment {segment_index}: " + "; ".join(_issue_text(i) for i in self.issues))

    @property
    def codes(self) -> set[str]:
        return {i.code if isinstance(i, Issue) else "PARSE" for i in self.issues}


class EmptyInput(BuildError):
    pass


class MergeFailed(BuildError):
    def __init__(self, report: T.ValidationReport):
        self.report = report
        super().__init__("merged tree failed validation:\n" + report.render())


def _issue_text(i: Issue | ParseIssue) -> str:
    if isinstance(i, ParseIssue):
        return str(i)
    return f"{i.code}" + (f" at {i.node_id}" if i.node_id else "") + f": {i.message}"


# ---------------------------------------------------------------------------
# segmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Segment:
    index: int
    text: str
    source_span: tuple[int, int]
    token_estimate: int


def estimate_tokens(text: str) -> int:
    return math.ceil(len(text) / 4)


_HEADING = re.compile(r"^(#{1,6}\s|[A-Z][A-Z0-9 ,/&()-]{2,}:?\s*$)")


def _blocks(text: str) -> list[tuple[int, int]]:
    """Character spans of paragraphs; each span runs up to the next paragraph's start."""
    starts: list[int] = []
    pos = 0
    prev_blank = True
    for line in text.splitlines(keepends=True):
        blank = not line.strip()
        if not blank and (prev_blank or _HEADING.match(line)):
            starts.append(pos)
        prev_blank = blank
        pos += len(line)
    if not starts:
        return [(0, len(text))] if text else []
    starts[0] = 0  # leading whitespace belongs to the first block
    spans = [(s, e) for s, e in zip(starts, starts[1:] + [len(text)])]
    # a heading travels with the paragraph under it
    merged: list[tuple[int, int]] = []
    for s, e in spans:
        if merged and _is_heading_only(text[merged[-1][0]:merged[-1][1]]):
            merged[-1] = (merged[-1][0], e)
        else:
            merged.append((s, e))
    return merged


def _is_heading_only(block: str) -> bool:
    lines = [ln for ln in block.splitlines() if ln.strip()]
    return len(lines) == 1 and bool(_HEADING.match(lines[0]))


def segment_guideline(
    text: str, budget: int, estimate: Callable[[str], int] = estimate_tokens
) -> list[Segment]:
    """Greedily pack whole paragraphs into segments of at most ``budget`` tokens.

    Segment texts concatenate back to ``text`` exactly; spans are UTF-8 byte offsets.
    """
    if not text.strip():
        raise ValueError("guideline text is empty")
    if budget < 1:
        raise ValueError("budget must be positive")
    blocks = _blocks(text)
    byte_at = _byte_offsets(text)
    groups: list[list[tuple[int, int, int]]] = []
    current: list[tuple[int, int, int]] = []
    used = 0
    for s, e in blocks:
        cost = estimate(text[s:e].strip())
        if cost > budget:
            raise ParagraphExceedsBudget((byte_at[s], byte_at[e]), cost, budget)
        if current and used + cost > budget:
            groups.append(current)
            current, used = [], 0
        current.append((s, e, cost))
        used += cost
    if current:
        groups.append(current)
    out = []
    for i, g in enumerate(groups):
        s, e = g[0][0], g[-1][1]
        out.append(Segment(i, text[s:e], (byte_at[s], byte_at[e]), sum(c for _, _, c in g)))
    return out


def _byte_offsets(text: str) -> list[int]:
    offs = [0]
    for ch in text:
        offs.append(offs[-1] + len(ch.encode("utf-8")))
    return offs


# ---------------------------------------------------------------------------
# prompt
# ---------------------------------------------------------------------------

_SCHEMA_DOC = """\
{
  "schema_version": "1",
  "domain": "<short domain label>",
  "root": "<id of the first node>",
  "nodes": {
    "<node id>": {"kind": "simple", "feature": "<snake_case feature id>",
                  "question": "<yes/no question>",
                  "on_yes": <target>, "on_no": <target>},
    "<node id>": {"kind": "multi", "threshold": <k>,
                  "criteria": [{"feature": "<feature id>", "question": "<yes/no question>"}, ...],
                  "on_met": <target>, "on_not_met": <target>}
  },
  "actions": {
    "<action id>": {"label": "<recommended action>", "referral": true | false}
  }
}
<target> is one of {"node": "<node id>"}, {"action": "<action id>"}, {"end": true},
or {"continue": true} when the pathway carries on in a later part of the guideline."""

_EXAMPLE_SIMPLE = {
    "schema_version": "1",
    "domain": "example",
    "root": "n1",
    "nodes": {
        "n1": {
            "kind": "simple",
            "feature": "sudden_severe_onset",
            "question": "Did the symptom reach maximum intensity within one minute?",
            "on_yes": {"action": "refer_emergency"},
            "on_no": {"continue": True},
        }
    },
    "actions": {"refer_emergency": {"label": "Refer to the emergency department", "referral": True}},
}

_EXAMPLE_MULTI = {
    "schema_version": "1",
    "domain": "example",
    "root": "n1",
    "nodes": {
        "n1": {
            "kind": "multi",
            "threshold": 2,
            "criteria": [
                {"feature": "fever", "question": "Does the patient have a fever?"},
                {"feature": "neck_stiffness", "question": "Is there neck stiffness?"},
                {"feature": "rash", "question": "Is there a non-blanching rash?"},
            ],
            "on_met": {"action": "refer_emergency"},
            "on_not_met": {"continue": True},
        }
    },
    "actions": {"refer_emergency": {"label": "Refer to the emergency department", "referral": True}},
}


@dataclass(frozen=True)
class TreePrompter:
    """Versioned instruction template; checked once when constructed."""

    schema_doc: str
    examples: tuple[dict[str, Any], ...]
    version: str = TEMPLATE_VERSION

    def __post_init__(self):
        if not self.schema_doc.strip():
            raise ValueError("tree prompt schema block is empty")
        kinds = set()
        for ex in self.examples:
            t = parse_tree(ex, allow_continue=True)
            if not validate_tree(t, subtree=True).ok:
                raise ValueError("tree prompt example does not validate")
            kinds |= {n.kind for n in t.nodes.values()}
        if kinds != {"simple", "multi"}:
            raise ValueError("tree prompt examples must show both node kinds")

    def render(self, segment: Segment) -> str:
        if not segment.text.strip():
            raise ValueError("segment text is empty")
        ex = "\n\n".join(json.dumps(e, indent=2, sort_keys=True) for e in self.examples)
        return (
            f"[template {self.version}]\n"
            "You convert clinical guideline text into a decision tree.\n"
            "Extract every decision point in the excerpt below, in the order the text\n"
            "gives them, most urgent first. Use a simple node for a single yes/no\n"
            "condition and a multi node when the text asks for at least k of n criteria;\n"
            "count the criteria carefully so that 1 <= threshold <= number of criteria.\n"
            "Mark actions that send the patient to another service or specialist with\n"
            '"referral": true. Where the excerpt stops without deciding, use\n'
            '{"continue": true}. Reply with one JSON object and nothing else.\n\n'
            f"Schema:\n{self.schema_doc}\n\n"
            f"Examples:\n{ex}\n\n"
            f"Guideline excerpt (segment {segment.index}):\n"
            "<<<\n"
            f"{segment.text.strip()}\n"
            ">>>\n"
        )


PROMPTER = TreePrompter(_SCHEMA_DOC, (_EXAMPLE_SIMPLE, _EXAMPLE_MULTI))


def emit_tree_prompt(segment: Segment, prompter: TreePrompter = PROMPTER) -> str:
    return prompter.render(segment)


# ---------------------------------------------------------------------------
# reply parsing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Subtree:
    segment_index: int
    tree: GuidanceTree

    @property
    def markers(self) -> list[tuple[str, str]]:
        return [
            (nid, label)
            for nid, n in self.tree.nodes.items()
            for label, t in n.branches()
            if t.kind == "continue"
        ]


_FENCE = re.compile(r"```[A-Za-z0-9_-]*\s*\n?")
_NEGATIVE = {"simple": "on_no", "multi": "on_not_met"}


def _extract_json(reply: str) -> Any:
    text = _FENCE.sub("", reply)
    decoder = json.JSONDecoder(object_pairs_hook=T._pairs_hook)
    for m in re.finditer(r"\{", text):
        try:
            obj, _ = decoder.raw_decode(text, m.start())
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict):
            return obj
    return None


def _mark_open_exits(doc: dict) -> None:
    """Negative exits that are missing or point outside the fragment become continue-markers."""
    nodes = doc.get("nodes")
    if not isinstance(nodes, dict):
        return
    for node in nodes.values():
        if not isinstance(node, dict):
            continue
        key = _NEGATIVE.get(node.get("kind"))
        if key is None:
            continue
        t = node.get(key)
        if t is None or (isinstance(t, dict) and set(t) == {"node"} and t["node"] not in nodes):
            node[key] = {"continue": True}


def parse_model_tree(reply: str, segment_index: int = 0) -> Subtree:
    doc = _extract_json(reply)
    if doc is None:
        raise Unparseable(segment_index, "no JSON object found in reply")
    _mark_open_exits(doc)
    try:
        tree = parse_tree(doc, allow_continue=True)
    except TreeParseError as exc:
        raise SchemaViolation(segment_index, exc.issues) from exc
    report = validate_tree(tree, subtree=True)
    if not report.ok:
        raise SchemaViolation(segment_index, report.errors)
    return Subtree(segment_index, tree)


# ---------------------------------------------------------------------------
# merge
# ---------------------------------------------------------------------------


def _norm_label(label: str) -> str:
    return " ".join(re.sub(r"[^\w\s]", " ", label.lower()).split())


def _retarget(t: Target, nodes: dict[str, str], actions: dict[str, str], cont: Target | None) -> Target:
    if t.kind == "node":
        return Target.node(nodes[t.ref])
    if t.kind == "action":
        return Target.action(actions[t.ref])
    if t.kind == "continue" and cont is not None:
        return cont
    return t


def _rewrite(node, new_id: str, nodes, actions, cont):
    if isinstance(node, SimpleNode):
        return replace(
            node, id=new_id,
            on_yes=_retarget(node.on_yes, nodes, actions, cont),
            on_no=_retarget(node.on_no, nodes, actions, cont),
        )
    return replace(
        node, id=new_id,
        on_met=_retarget(node.on_met, nodes, actions, cont),
        on_not_met=_retarget(node.on_not_met, nodes, actions, cont),
    )


def _fresh(base: str, segment_index: int, taken: set[str]) -> str:
    if base not in taken:
        return base
    cand = f"s{segment_index}_{base}"
    n = 2
    while cand in taken:
        cand = f"s{segment_index}_{base}_{n}"
        n += 1
    return cand


def chain(a: Subtree, b: Subtree) -> Subtree:
    """Attach ``b`` to every continue-marker of ``a``; ``b``'s markers stay open."""
    node_map = {}
    taken = set(a.tree.nodes)
    for nid in b.tree.nodes:
        node_map[nid] = _fresh(nid, b.segment_index, taken)
        taken.add(node_map[nid])

    actions = {aid: replace(act, priority=None) for aid, act in a.tree.actions.items()}
    by_key = {(_norm_label(x.label), x.referral): aid for aid, x in actions.items()}
    action_map = {}
    for aid, act in b.tree.actions.items():
        key = (_norm_label(act.label), act.referral)
        if key in by_key:
            action_map[aid] = by_key[key]
            continue
        new = _fresh(aid, b.segment_index, set(actions))
        actions[new] = ActionDef(new, act.label, act.referral)
        by_key[key] = new
        action_map[aid] = new

    ident_a = {nid: nid for nid in a.tree.nodes}
    ident_aa = {aid: aid for aid in a.tree.actions}
    entry = Target.node(node_map[b.tree.root])
    nodes = {nid: _rewrite(n, nid, ident_a, ident_aa, entry) for nid, n in a.tree.nodes.items()}
    for nid, n in b.tree.nodes.items():
        nodes[node_map[nid]] = _rewrite(n, node_map[nid], node_map, action_map, None)

    groups = list(a.tree.exclusive_groups)
    for g in b.tree.exclusive_groups:
        if g not in groups:
            groups.append(g)
    merged = replace(a.tree, nodes=nodes, actions=actions, exclusive_groups=tuple(groups))
    return Subtree(a.segment_index, merged)


def close_subtree(s: Subtree) -> GuidanceTree:
    """Cap open markers with ``end`` and require a fully valid tree."""
    if s.markers:
        end = Target.end()
        nodes = {nid: _rewrite(n, nid, {k: k for k in s.tree.nodes}, {k: k for k in s.tree.actions}, end)
                 for nid, n in s.tree.nodes.items()}
        tree = replace(s.tree, nodes=nodes)
    else:
        tree = s.tree
    report = validate_tree(tree)
    if not report.ok:
        raise MergeFailed(report)
    return tree


def merge_subtrees(subtrees: Sequence[Subtree], domain: str | None = None) -> GuidanceTree:
    """Chain subtrees in order on their continue-markers and validate the result.

    Later node or action ids that collide with earlier ones are prefixed with
    their segment index; actions with the same normalized label and referral
    flag collapse into one.
    """
    if not subtrees:
        raise EmptyInput("no subtrees to merge")
    acc = subtrees[0]
    for s in subtrees[1:]:
        acc = chain(acc, s)
    tree = close_subtree(acc)
    if domain is not None and domain != tree.domain:
        tree = replace(tree, domain=domain)
    return tree


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


@dataclass
class BuildResult:
    segments: list[Segment]
    prompts: list[str]
    replies: list[str]
    tree: GuidanceTree | None
    report: T.ValidationReport | None
    failures: list[BuildError]


def build_tree(
    text: str,
    budget: int,
    respond: Callable[[int, str], str],
    *,
    domain: str | None = None,
    out_dir: str | Path | None = None,
) -> BuildResult:
    """Run the full pipeline.  ``respond(index, prompt)`` returns the model reply.

    Every segment is attempted before failing, so one bad reply does not hide
    another.  Files written to ``out_dir``: prompt_NN.txt, reply_NN.txt,
    tree.json (only when the merge succeeds) and lint.json.
    """
    segments = segment_guideline(text, budget)
    prompts = [emit_tree_prompt(s) for s in segments]
    replies, subtrees, failures = [], [], []
    for seg, prompt in zip(segments, prompts):
        reply = respond(seg.index, prompt)
        replies.append(reply)
        try:
            subtrees.append(parse_model_tree(reply, seg.index))
        except BuildError as exc:
            failures.append(exc)
    tree = report = None
    if not failures:
        try:
            tree = merge_subtrees(subtrees, domain)
            report = validate_tree(tree)
        except BuildError as exc:
            failures.append(exc)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for i, (p, r) in enumerate(zip(prompts, replies)):
            (out / f"prompt_{i:02d}.txt").write_text(p, encoding="utf-8")
            (out / f"reply_{i:02d}.txt").write_text(r, encoding="utf-8")
        if tree is not None:
            (out / "tree.json").write_bytes(serialize_tree(tree))
        lint = {
            "template_version": TEMPLATE_VERSION,
            "segments": [{"index": s.index, "span": list(s.source_span), "token_estimate": s.token_estimate} for s in segments],
            "failures": [_failure_json(f) for f in failures],
            "report": report.to_json() if report else None,
        }
        (out / "lint.json").write_text(json.dumps(lint, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return BuildResult(segments, prompts, replies, tree, report, failures)


def _failure_json(f: BuildError) -> dict[str, Any]:
    d: dict[str, Any] = {"type": type(f).__name__, "message": str(f)}
    if isinstance(f, (Unparseable, SchemaViolation)):
        d["segment_index"] = f.segment_index
    if isinstance(f, SchemaViolation):
        d["codes"] = sorted(f.codes)
    return d
