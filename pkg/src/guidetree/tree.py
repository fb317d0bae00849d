"""Guidance-tree data model: parsing, validation, canonical serialization.

A guidance tree is a rooted, acyclic decision graph.  Decision nodes are
either *simple* (one yes/no feature check) or *multi* (k-of-n criteria).
Every branch points at another node, at an action, or at ``end``.

Document format (``schema_version`` "1")::

    {
      "schema_version": "1",
      "domain": "headache",
      "root": "n1",
      "nodes": {
        "n1": {"kind": "simple", "feature": "thunderclap", "question": "...",
               "on_yes": {"action": "a1"}, "on_no": {"node": "n2"}},
        "n2": {"kind": "multi", "threshold": 2,
               "criteria": [{"feature": "f1", "question": "..."}, ...],
               "on_met": {"action": "a2"}, "on_not_met": {"end": true}}
      },
      "actions": {"a1": {"label": "...", "referral": true, "priority": 0}},
      "exclusive_groups": [["psa_ge_20", "psa_lt_20"]]
    }

``priority`` is optional per action (see :func:`assign_priorities`) and
``exclusive_groups`` is optional; it lists features that can never be
positive together in one patient.
"""

from __future__ import annotations

import hashlib
import json
from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field, replace
from typing import Any, Union

SCHEMA_VERSION = "1"

TARGET_KINDS = ("node", "action", "end", "continue")

# validation codes
DANGLING_REF = "DANGLING_REF"
CYCLE = "CYCLE"
UNREACHABLE = "UNREACHABLE"
BAD_THRESHOLD = "BAD_THRESHOLD"
NO_ACTION_REACHABLE = "NO_ACTION_REACHABLE"
DUPLICATE_PRIORITY = "DUPLICATE_PRIORITY"
DUPLICATE_QUESTION_TEXT = "DUPLICATE_QUESTION_TEXT"
UNUSED_ACTION = "UNUSED_ACTION"


@dataclass(frozen=True)
class Target:
    kind: str
    ref: str | None = None

    @classmethod
    def node(cls, node_id: str) -> Target:
        return cls("node", node_id)

    @classmethod
    def action(cls, action_id: str) -> Target:
        return cls("action", action_id)

    @classmethod
    def end(cls) -> Target:
        return cls("end")

    @classmethod
    def continue_(cls) -> Target:
        return cls("continue")

    def to_json(self) -> dict[str, Any]:
        if self.kind in ("end", "continue"):
            return {self.kind: True}
        return {self.kind: self.ref}

    def __str__(self) -> str:
        return self.kind if self.ref is None else f"{self.kind}:{self.ref}"


@dataclass(frozen=True)
class ActionDef:
    id: str
    label: str
    referral: bool
    priority: int | None = None


@dataclass(frozen=True)
class Criterion:
    feature: str
    question: str


@dataclass(frozen=True)
class SimpleNode:
    id: str
    feature: str
    question: str
    on_yes: Target
    on_no: Target

    kind = "simple"

    def branches(self) -> tuple[tuple[str, Target], ...]:
        return (("yes", self.on_yes), ("no", self.on_no))

    def features(self) -> tuple[str, ...]:
        return (self.feature,)


@dataclass(frozen=True)
class MultiNode:
    id: str
    criteria: tuple[Criterion, ...]
    threshold: int
    on_met: Target
    on_not_met: Target

    kind = "multi"

    def branches(self) -> tuple[tuple[str, Target], ...]:
        return (("met", self.on_met), ("not_met", self.on_not_met))

    def features(self) -> tuple[str, ...]:
        return tuple(c.feature for c in self.criteria)


Node = Union[SimpleNode, MultiNode]


@dataclass(frozen=True)
class GuidanceTree:
    domain: str
    root: str
    nodes: dict[str, Node]
    actions: dict[str, ActionDef]
    schema_version: str = SCHEMA_VERSION
    exclusive_groups: tuple[tuple[str, ...], ...] = ()

    def features(self) -> list[str]:
        """All feature ids, in preorder of first appearance from the root."""
        seen: dict[str, None] = {}
        for node in self.preorder_nodes():
            for f in node.features():
                seen.setdefault(f, None)
        for node in self.nodes.values():
            for f in node.features():
                seen.setdefault(f, None)
        return list(seen)

    def preorder_nodes(self) -> Iterator[Node]:
        """Nodes in depth-first preorder, positive branch first; shared nodes once."""
        visited: set[str] = set()
        stack = [self.root]
        while stack:
            nid = stack.pop()
            if nid in visited or nid not in self.nodes:
                continue
            visited.add(nid)
            node = self.nodes[nid]
            yield node
            for _, t in reversed(node.branches()):
                if t.kind == "node":
                    stack.append(t.ref)

    def nodes_with_feature(self, feature: str) -> list[Node]:
        return [n for n in self.nodes.values() if feature in n.features()]


@dataclass(frozen=True)
class Issue:
    code: str
    node_id: str | None
    message: str

    def to_json(self) -> dict[str, Any]:
        return {"code": self.code, "node_id": self.node_id, "message": self.message}


@dataclass
class ValidationReport:
    errors: list[Issue] = field(default_factory=list)
    warnings: list[Issue] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def codes(self) -> set[str]:
        return {e.code for e in self.errors}

    def to_json(self) -> dict[str, Any]:
        return {
            "ok": self.ok,
            "errors": [e.to_json() for e in self.errors],
            "warnings": [w.to_json() for w in self.warnings],
        }

    def render(self) -> str:
        lines = ["OK" if self.ok else f"INVALID ({len(self.errors)} error(s))"]
        for label, issues in (("error", self.errors), ("warning", self.warnings)):
            for i in issues:
                where = f" [{i.node_id}]" if i.node_id else ""
                lines.append(f"  {label} {i.code}{where}: {i.message}")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParseIssue:
    path: str
    message: str

    def __str__(self) -> str:
        return f"{self.path}: {self.message}"


class TreeParseError(ValueError):
    def __init__(self, issues: list[ParseIssue]):
        self.issues = issues
        super().__init__("; ".join(str(i) for i in issues))


class _PairsDict(dict):
    duplicates: tuple[str, ...] = ()


def _pairs_hook(pairs: list[tuple[str, Any]]) -> _PairsDict:
    d = _PairsDict()
    dups = []
    for k, v in pairs:
        if k in d:
            dups.append(k)
        d[k] = v
    d.duplicates = tuple(dups)
    return d


def load_json_document(data: bytes | str) -> Any:
    """Decode JSON keeping track of duplicate object keys."""
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    return json.loads(data, object_pairs_hook=_pairs_hook)


class _Parser:
    def __init__(self, allow_continue: bool):
        self.allow_continue = allow_continue
        self.issues: list[ParseIssue] = []

    def fail(self, path: str, message: str) -> None:
        self.issues.append(ParseIssue(path, message))

    def obj(self, value: Any, path: str) -> Mapping[str, Any] | None:
        if not isinstance(value, Mapping):
            self.fail(path, f"expected object, got {type(value).__name__}")
            return None
        for dup in getattr(value, "duplicates", ()):
            self.fail(f"{path}.{dup}", "duplicate key")
        return value

    def string(self, m: Mapping[str, Any], key: str, path: str) -> str | None:
        if key not in m:
            self.fail(f"{path}.{key}", "missing required field")
            return None
        v = m[key]
        if not isinstance(v, str) or not v:
            self.fail(f"{path}.{key}", "expected non-empty string")
            return None
        return v

    def integer(self, m: Mapping[str, Any], key: str, path: str, required: bool = True) -> int | None:
        if key not in m:
            if required:
                self.fail(f"{path}.{key}", "missing required field")
            return None
        v = m[key]
        if isinstance(v, bool) or not isinstance(v, int):
            self.fail(f"{path}.{key}", f"expected integer, got {v!r}")
            return None
        return v

    def target(self, m: Mapping[str, Any], key: str, path: str) -> Target | None:
        p = f"{path}.{key}"
        if key not in m:
            self.fail(p, "missing required field")
            return None
        t = self.obj(m[key], p)
        if t is None:
            return None
        if len(t) != 1:
            self.fail(p, "target must have exactly one of node/action/end")
            return None
        (kind, ref), = t.items()
        if kind in ("node", "action"):
            if not isinstance(ref, str) or not ref:
                self.fail(f"{p}.{kind}", "expected non-empty string id")
                return None
            return Target(kind, ref)
        if kind == "end" or (kind == "continue" and self.allow_continue):
            if ref is not True:
                self.fail(f"{p}.{kind}", "expected true")
                return None
            return Target(kind)
        self.fail(p, f"unknown target kind {kind!r}")
        return None

    def node(self, nid: str, value: Any, path: str) -> Node | None:
        m = self.obj(value, path)
        if m is None:
            return None
        kind = m.get("kind")
        if kind == "simple":
            feature = self.string(m, "feature", path)
            question = self.string(m, "question", path)
            on_yes = self.target(m, "on_yes", path)
            on_no = self.target(m, "on_no", path)
            if None in (feature, question, on_yes, on_no):
                return None
            return SimpleNode(nid, feature, question, on_yes, on_no)
        if kind == "multi":
            threshold = self.integer(m, "threshold", path)
            on_met = self.target(m, "on_met", path)
            on_not_met = self.target(m, "on_not_met", path)
            criteria = []
            raw = m.get("criteria")
            if not isinstance(raw, list) or not raw:
                self.fail(f"{path}.criteria", "expected non-empty list")
            else:
                seen = set()
                for i, c in enumerate(raw):
                    cp = f"{path}.criteria[{i}]"
                    cm = self.obj(c, cp)
                    if cm is None:
                        continue
                    f = self.string(cm, "feature", cp)
                    q = self.string(cm, "question", cp)
                    if f is None or q is None:
                        continue
                    if f in seen:
                        self.fail(f"{cp}.feature", f"feature {f!r} repeated within node")
                    seen.add(f)
                    criteria.append(Criterion(f, q))
            if threshold is None or on_met is None or on_not_met is None or not criteria:
                return None
            return MultiNode(nid, tuple(criteria), threshold, on_met, on_not_met)
        if "kind" not in m:
            self.fail(f"{path}.kind", "missing required field")
        else:
            self.fail(f"{path}.kind", f"unknown node kind {kind!r}")
        return None

    def action(self, aid: str, value: Any, path: str) -> ActionDef | None:
        m = self.obj(value, path)
        if m is None:
            return None
        label = self.string(m, "label", path)
        referral = m.get("referral")
        if not isinstance(referral, bool):
            self.fail(f"{path}.referral", "expected boolean")
            referral = None
        priority = self.integer(m, "priority", path, required=False)
        if priority is not None and priority < 0:
            self.fail(f"{path}.priority", "expected non-negative integer")
        if label is None or referral is None:
            return None
        return ActionDef(aid, label, referral, priority)

    def tree(self, doc: Any) -> GuidanceTree | None:
        m = self.obj(doc, "$")
        if m is None:
            return None
        version = m.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            self.fail("$.schema_version", f"unsupported schema version {version!r}")
        domain = self.string(m, "domain", "$")
        root = self.string(m, "root", "$")
        nodes: dict[str, Node] = {}
        actions: dict[str, ActionDef] = {}
        raw_nodes = self.obj(m.get("nodes"), "$.nodes") if "nodes" in m else None
        if "nodes" not in m:
            self.fail("$.nodes", "missing required field")
        if raw_nodes is not None:
            for nid, nv in raw_nodes.items():
                n = self.node(nid, nv, f"$.nodes.{nid}")
                if n is not None:
                    nodes[nid] = n
        if "actions" not in m:
            self.fail("$.actions", "missing required field")
        else:
            raw_actions = self.obj(m["actions"], "$.actions")
            if raw_actions is not None:
                for aid, av in raw_actions.items():
                    a = self.action(aid, av, f"$.actions.{aid}")
                    if a is not None:
                        actions[aid] = a
        groups: list[tuple[str, ...]] = []
        raw_groups = m.get("exclusive_groups", [])
        if not isinstance(raw_groups, list):
            self.fail("$.exclusive_groups", "expected list of lists")
        else:
            for i, g in enumerate(raw_groups):
                if not isinstance(g, list) or len(g) < 2 or not all(isinstance(x, str) for x in g):
                    self.fail(f"$.exclusive_groups[{i}]", "expected list of at least 2 feature ids")
                else:
                    groups.append(tuple(g))
        unknown = set(m) - {"schema_version", "domain", "root", "nodes", "actions", "exclusive_groups"}
        for k in sorted(unknown):
            self.fail(f"$.{k}", "unknown top-level field")
        if self.issues or domain is None or root is None:
            return None
        return GuidanceTree(domain, root, nodes, actions, version, tuple(groups))


def parse_tree(data: bytes | str | Mapping[str, Any], *, allow_continue: bool = False) -> GuidanceTree:
    """Parse a tree document; raises :class:`TreeParseError` listing every field-level problem.

    Referential and graph checks are left to :func:`validate_tree`.
    """
    if isinstance(data, (bytes, str)):
        try:
            doc = load_json_document(data)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise TreeParseError([ParseIssue("$", f"malformed document: {exc}")]) from exc
    else:
        doc = data
    parser = _Parser(allow_continue)
    tree = parser.tree(doc)
    if tree is None:
        raise TreeParseError(parser.issues or [ParseIssue("$", "invalid tree")])
    return tree


def load_tree(path) -> GuidanceTree:
    with open(path, "rb") as fh:
        return parse_tree(fh.read())


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


def _find_cycles(tree: GuidanceTree) -> list[list[str]]:
    white, grey, black = 0, 1, 2
    color = {nid: white for nid in tree.nodes}
    cycles: list[list[str]] = []

    def succ(nid: str) -> list[str]:
        return [t.ref for _, t in tree.nodes[nid].branches() if t.kind == "node" and t.ref in tree.nodes]

    for start in tree.nodes:
        if color[start] != white:
            continue
        path = [start]
        color[start] = grey
        iters = [iter(succ(start))]
        while iters:
            nxt = next(iters[-1], None)
            if nxt is None:
                color[path.pop()] = black
                iters.pop()
                continue
            if color[nxt] == grey:
                cycles.append(path[path.index(nxt):] + [nxt])
            elif color[nxt] == white:
                color[nxt] = grey
                path.append(nxt)
                iters.append(iter(succ(nxt)))
    return cycles


def validate_tree(tree: GuidanceTree, *, subtree: bool = False) -> ValidationReport:
    """Referential, graph and threshold checks.

    With ``subtree=True`` continue-markers are accepted and a fragment need
    not decide anything on its own.
    """
    report = ValidationReport()
    err = report.errors.append
    warn = report.warnings.append

    if tree.root not in tree.nodes:
        err(Issue(DANGLING_REF, None, f"root {tree.root!r} is not a node"))

    used_actions: set[str] = set()
    for nid, node in tree.nodes.items():
        for label, t in node.branches():
            if t.kind == "node" and t.ref not in tree.nodes:
                err(Issue(DANGLING_REF, nid, f"{label} targets missing node {t.ref!r}"))
            elif t.kind == "action":
                if t.ref not in tree.actions:
                    err(Issue(DANGLING_REF, nid, f"{label} targets missing action {t.ref!r}"))
                used_actions.add(t.ref)
            elif t.kind == "continue" and not subtree:
                err(Issue(DANGLING_REF, nid, f"{label} is an unresolved continue-marker"))
        if isinstance(node, MultiNode) and not 1 <= node.threshold <= len(node.criteria):
            err(Issue(
                BAD_THRESHOLD, nid,
                f"threshold {node.threshold} outside 1..{len(node.criteria)}",
            ))

    known_features = {f for n in tree.nodes.values() for f in n.features()}
    for i, group in enumerate(tree.exclusive_groups):
        for f in group:
            if f not in known_features:
                err(Issue(DANGLING_REF, None, f"exclusive_groups[{i}] names unknown feature {f!r}"))

    for cyc in _find_cycles(tree):
        err(Issue(CYCLE, cyc[0], "cycle: " + " -> ".join(cyc)))

    reachable: set[str] = set()
    reach_action = False
    if tree.root in tree.nodes:
        stack = [tree.root]
        while stack:
            nid = stack.pop()
            if nid in reachable:
                continue
            reachable.add(nid)
            for _, t in tree.nodes[nid].branches():
                if t.kind == "node" and t.ref in tree.nodes:
                    stack.append(t.ref)
                elif t.kind == "action" and t.ref in tree.actions:
                    reach_action = True
    for nid in tree.nodes:
        if nid not in reachable:
            err(Issue(UNREACHABLE, nid, "node is not reachable from root"))
    if not reach_action and not subtree and tree.root in tree.nodes:
        err(Issue(NO_ACTION_REACHABLE, None, "no action is reachable from root"))

    by_priority: dict[int, list[str]] = {}
    for a in tree.actions.values():
        if a.priority is not None:
            by_priority.setdefault(a.priority, []).append(a.id)
    for p, ids in sorted(by_priority.items()):
        if len(ids) > 1:
            err(Issue(DUPLICATE_PRIORITY, None, f"priority {p} shared by {sorted(ids)}"))

    seen_q: dict[str, str] = {}
    for nid, node in tree.nodes.items():
        texts = [node.question] if isinstance(node, SimpleNode) else [c.question for c in node.criteria]
        for q in texts:
            key = " ".join(q.lower().split())
            if key in seen_q:
                warn(Issue(DUPLICATE_QUESTION_TEXT, nid, f"question also asked at {seen_q[key]}: {q!r}"))
            else:
                seen_q[key] = nid
    for aid in tree.actions:
        if aid not in used_actions:
            warn(Issue(UNUSED_ACTION, None, f"action {aid!r} is never targeted"))
    return report


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _node_json(node: Node) -> dict[str, Any]:
    if isinstance(node, SimpleNode):
        return {
            "kind": "simple",
            "feature": node.feature,
            "question": node.question,
            "on_yes": node.on_yes.to_json(),
            "on_no": node.on_no.to_json(),
        }
    return {
        "kind": "multi",
        "criteria": [{"feature": c.feature, "question": c.question} for c in node.criteria],
        "threshold": node.threshold,
        "on_met": node.on_met.to_json(),
        "on_not_met": node.on_not_met.to_json(),
    }


def tree_to_json(tree: GuidanceTree) -> dict[str, Any]:
    actions = {}
    for aid, a in tree.actions.items():
        entry: dict[str, Any] = {"label": a.label, "referral": a.referral}
        if a.priority is not None:
            entry["priority"] = a.priority
        actions[aid] = entry
    doc: dict[str, Any] = {
        "schema_version": tree.schema_version,
        "domain": tree.domain,
        "root": tree.root,
        "nodes": {nid: _node_json(n) for nid, n in tree.nodes.items()},
        "actions": actions,
    }
    if tree.exclusive_groups:
        doc["exclusive_groups"] = [list(g) for g in tree.exclusive_groups]
    return doc


def serialize_tree(tree: GuidanceTree) -> bytes:
    """Canonical bytes: sorted keys, two-space indent, trailing newline."""
    text = json.dumps(tree_to_json(tree), sort_keys=True, indent=2, ensure_ascii=False)
    return (text + "\n").encode("utf-8")


def tree_hash(tree: GuidanceTree) -> str:
    return "sha256:" + hashlib.sha256(serialize_tree(tree)).hexdigest()


# ---------------------------------------------------------------------------
# priorities
# ---------------------------------------------------------------------------


class PriorityConflict(ValueError):
    pass


def action_preorder(tree: GuidanceTree) -> list[str]:
    """Action ids by first occurrence in a yes-first depth-first walk from the root."""
    order: dict[str, None] = {}
    visited: set[str] = set()

    def walk(nid: str) -> None:
        if nid in visited or nid not in tree.nodes:
            return
        visited.add(nid)
        for _, t in tree.nodes[nid].branches():
            if t.kind == "action":
                order.setdefault(t.ref, None)
            elif t.kind == "node":
                walk(t.ref)

    walk(tree.root)
    return list(order)


def assign_priorities(tree: GuidanceTree) -> GuidanceTree:
    """Fill in missing action priorities from traversal order.

    Explicit priorities are kept.  Unranked actions take the smallest unused
    integers in order of first occurrence (actions never reached go last, by
    id).  The tree is returned unchanged when nothing is missing.
    """
    explicit = [a.priority for a in tree.actions.values() if a.priority is not None]
    if len(explicit) != len(set(explicit)):
        raise PriorityConflict(f"explicit priorities are not unique: {sorted(explicit)}")
    missing = [aid for aid, a in tree.actions.items() if a.priority is None]
    if not missing:
        return tree
    order = action_preorder(tree)
    rank = {aid: i for i, aid in enumerate(order)}
    missing.sort(key=lambda aid: (rank.get(aid, len(order)), aid))
    taken = set(explicit)
    free = (p for p in range(len(tree.actions) + len(taken)) if p not in taken)
    actions = dict(tree.actions)
    for aid in missing:
        actions[aid] = replace(actions[aid], priority=next(free))
    return replace(tree, actions=actions)


def priority_of(tree: GuidanceTree, action_id: str) -> int:
    p = tree.actions[action_id].priority
    if p is None:
        p = assign_priorities(tree).actions[action_id].priority
    return p


# ---------------------------------------------------------------------------
# escalation ordering
# ---------------------------------------------------------------------------


def _outcomes_below(tree: GuidanceTree, target: Target, memo: dict[str, frozenset]) -> frozenset:
    """Set of terminal targets (action ids, or None for end) reachable from ``target``."""
    if target.kind == "action":
        return frozenset([target.ref])
    if target.kind != "node":
        return frozenset([None])
    nid = target.ref
    if nid not in memo:
        memo[nid] = frozenset()
        node = tree.nodes[nid]
        out: frozenset = frozenset()
        for _, t in node.branches():
            out |= _outcomes_below(tree, t, memo)
        memo[nid] = out
    return memo[nid]


def escalation_violations(tree: GuidanceTree) -> list[str]:
    """Nodes where a spurious positive answer could lose a referral.

    A node is flagged when its negative branch can still reach a referral
    action but its positive branch can end somewhere that is not a
    referral.  On a tree with no violations, answers that only ever turn
    "no" into "yes" cannot turn a referral outcome into a non-referral one.
    """
    memo: dict[str, frozenset] = {}

    def is_ref(o):
        return o is not None and tree.actions[o].referral

    bad = []
    for nid, node in tree.nodes.items():
        (_, pos), (_, neg) = node.branches()
        if any(is_ref(o) for o in _outcomes_below(tree, neg, memo)) and not all(
            is_ref(o) for o in _outcomes_below(tree, pos, memo)
        ):
            bad.append(nid)
    return bad
