"""Vignette corpora: format, contracts, generation, narrative synthesis, statistics.

Each vignette carries a gold feature assignment (``True`` = present,
``False`` = explicitly denied, absent = not mentioned) and gold labels
derived from the gold traversal of its tree.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import random
import re
from collections import Counter
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from .engine import Trace, gold_trace, took_positive_branch
from .oracle import YES, NO, Answer, Question, _descriptor, derive_seed
from .tree import GuidanceTree, MultiNode, SimpleNode, assign_priorities, load_tree, tree_hash

FORMAT = "cpg-corpus/1"
CATEGORIES = ("single", "contrastive", "multi", "exclusion")
LENGTHS = ("unconstrained", "short", "medium", "long")
PROMPT_VERSION = "vignette-prompt/1"

SHORT_MAX = 100
LONG_MIN = 200

BANNED_PATTERNS = [
    r"\brefer\w*",
    r"\brecommend\w*",
    r"\bshould\b",
    r"\badvis\w*",
    r"\bmanagement plan\b",
    r"\bemergency department\b",
    r"\burology\b",
    r"\bneurology\b",
    r"\bspecialist\w*",
    r"\badmi(t|ssion)\b",
]
_BANNED = re.compile("|".join(BANNED_PATTERNS), re.IGNORECASE)


def word_count(text: str) -> int:
    return len(text.split())


def length_ok(condition: str, words: int) -> bool:
    if condition == "short":
        return words <= SHORT_MAX
    if condition == "medium":
        return SHORT_MAX < words < LONG_MIN
    if condition == "long":
        return words >= LONG_MIN
    return True


def banned_phrases(text: str) -> list[str]:
    return [m.group(0) for m in _BANNED.finditer(text)]


@dataclass
class Vignette:
    id: str
    domain: str
    category: str
    length_condition: str = "unconstrained"
    text: str = ""
    word_count: int = 0
    features: dict[str, bool] = field(default_factory=dict)
    gold_action: str | None = None
    gold_referral: bool = False
    gold_path_length: int = 0

    @property
    def positives(self) -> list[str]:
        return sorted(f for f, v in self.features.items() if v)

    @property
    def negatives(self) -> list[str]:
        return sorted(f for f, v in self.features.items() if not v)

    def to_json(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "domain": self.domain,
            "category": self.category,
            "length_condition": self.length_condition,
            "text": self.text,
            "word_count": self.word_count,
            "features": dict(sorted(self.features.items())),
            "gold_action": self.gold_action,
            "gold_referral": self.gold_referral,
            "gold_path_length": self.gold_path_length,
        }


@dataclass(frozen=True)
class Violation:
    vignette_id: str
    field: str
    message: str

    def __str__(self) -> str:
        return f"{self.vignette_id}.{self.field}: {self.message}"


class CorpusError(ValueError):
    """Schema or contract violations found while loading a corpus."""

    def __init__(self, violations: list[Violation]):
        self.violations = violations
        head = "; ".join(str(v) for v in violations[:5])
        more = f" (+{len(violations) - 5} more)" if len(violations) > 5 else ""
        super().__init__(head + more)


class InfeasibleCategory(ValueError):
    def __init__(self, category: str, reason: str):
        self.category = category
        self.reason = reason
        super().__init__(f"{category}: {reason}")


class MissingTemplate(KeyError):
    pass


class LengthInfeasible(ValueError):
    pass


def vignette_from_json(d: Mapping[str, Any]) -> Vignette:
    """Field-level decoding; raises CorpusError naming the offending field."""
    vid = str(d.get("id", "?"))
    bad: list[Violation] = []

    def need(key, types, check=None, msg="invalid value"):
        if key not in d:
            bad.append(Violation(vid, key, "missing required field"))
            return None
        v = d[key]
        if not isinstance(v, types) or (check is not None and not check(v)):
            bad.append(Violation(vid, key, msg))
            return None
        return v

    need("id", str, bool, "expected non-empty string")
    domain = need("domain", str)
    category = need("category", str, lambda c: c in CATEGORIES, f"expected one of {CATEGORIES}")
    length = need("length_condition", str, lambda c: c in LENGTHS, f"expected one of {LENGTHS}")
    text = need("text", str)
    wc = need("word_count", int, lambda n: not isinstance(n, bool) and n >= 0, "expected non-negative integer")
    feats = need(
        "features", dict,
        lambda m: all(isinstance(k, str) and isinstance(v, bool) for k, v in m.items()),
        "expected map of feature id to boolean",
    )
    gold_action = d.get("gold_action")
    if gold_action is not None and not isinstance(gold_action, str):
        bad.append(Violation(vid, "gold_action", "expected string or null"))
    referral = need("gold_referral", bool)
    plen = need("gold_path_length", int, lambda n: not isinstance(n, bool) and n >= 0, "expected non-negative integer")
    if bad:
        raise CorpusError(bad)
    return Vignette(vid, domain, category, length, text, wc, dict(feats), gold_action, referral, plen)


# ---------------------------------------------------------------------------
# contracts
# ---------------------------------------------------------------------------


class TreeAnalysis:
    """Cached facts about a tree used by the category contracts and the generator."""

    def __init__(self, tree: GuidanceTree):
        self.tree = assign_priorities(tree)
        self.features = self.tree.features()
        self.simple_features = {n.feature for n in self.tree.nodes.values() if isinstance(n, SimpleNode)}
        self.multi_nodes = [n for n in self.tree.nodes.values() if isinstance(n, MultiNode)]
        self._gold: dict[frozenset, Trace] = {}
        self.group_of: dict[str, int] = {}
        for i, g in enumerate(self.tree.exclusive_groups):
            for f in g:
                self.group_of[f] = i

    def gold(self, features: Mapping[str, bool]) -> Trace:
        key = frozenset(features.items())
        if key not in self._gold:
            self._gold[key] = gold_trace(self.tree, features)
        return self._gold[key]

    def fires(self, feature: str) -> bool:
        return took_positive_branch(self.gold({feature: True}))

    def individual_action(self, feature: str) -> str | None:
        return self.gold({feature: True}).outcome.action_id

    def priority(self, action_id: str) -> int:
        return self.tree.actions[action_id].priority

    def firing_features(self) -> list[str]:
        return [f for f in self.features if self.fires(f)]

    def exclusive_conflicts(self, positives: Iterable[str]) -> list[int]:
        c = Counter(self.group_of[f] for f in positives if f in self.group_of)
        return sorted(g for g, n in c.items() if n > 1)

    def subthreshold_only(self, positives: Sequence[str]) -> bool:
        if any(f in self.simple_features for f in positives):
            return False
        pos = set(positives)
        return all(sum(c.feature in pos for c in n.criteria) < n.threshold for n in self.multi_nodes)

    def contract_failures(self, v: Vignette, category: str | None = None) -> list[str]:
        """Reasons ``v`` does not satisfy the contract of ``category`` (default: its own)."""
        category = category or v.category
        pos, neg = v.positives, v.negatives
        trace = self.gold(v.features)
        out = trace.outcome.action_id
        why: list[str] = []
        if category == "single":
            if len(pos) != 1:
                why.append(f"single needs exactly one positive feature, has {len(pos)}")
            elif not self.fires(pos[0]):
                why.append(f"positive feature {pos[0]!r} does not trigger any branch on its own")
            if neg:
                why.append("single must not carry explicitly denied features")
        elif category == "multi":
            if neg:
                why.append("multi must not carry explicitly denied features")
            acts = {self.individual_action(f) for f in pos if self.fires(f)} - {None}
            if len(acts) < 2:
                why.append("multi needs >=2 positive features whose individual actions differ")
            else:
                best = min(acts, key=self.priority)
                if out != best:
                    why.append(f"gold outcome {out!r} is not the highest-priority individual action {best!r}")
        elif category == "contrastive":
            if not pos:
                why.append("contrastive needs >=1 positive feature")
            if not neg:
                why.append("contrastive needs >=1 explicitly denied feature")
            if pos and not took_positive_branch(trace):
                why.append("positive features trigger no branch")
        elif category == "exclusion":
            if not self.subthreshold_only(pos):
                why.append("exclusion positives must stay below every criteria threshold")
            if out is not None and self.tree.actions[out].referral:
                why.append(f"exclusion gold outcome {out!r} is a referral")
        else:
            why.append(f"unknown category {category!r}")
        return why

    def categories_satisfied(self, v: Vignette) -> list[str]:
        return [c for c in CATEGORIES if not self.contract_failures(v, c)]


def validate_vignette(tree: GuidanceTree | TreeAnalysis, v: Vignette) -> list[Violation]:
    """Check gold labels against the gold traversal and the category contract.

    Text checks (word count, length condition, banned phrases) apply only
    when the vignette has text.
    """
    an = tree if isinstance(tree, TreeAnalysis) else TreeAnalysis(tree)
    bad: list[Violation] = []
    known = set(an.features)
    unknown = sorted(f for f in v.features if f not in known)
    if unknown:
        bad.append(Violation(v.id, "features", f"unknown feature ids {unknown}"))
        return bad
    for g in an.exclusive_conflicts(v.positives):
        bad.append(Violation(v.id, "features", f"mutually exclusive features both positive: {an.tree.exclusive_groups[g]}"))
    trace = an.gold(v.features)
    out = trace.outcome
    if out.action_id != v.gold_action:
        bad.append(Violation(v.id, "gold_action", f"gold traversal gives {out.action_id!r}, record says {v.gold_action!r}"))
    if out.referral != v.gold_referral:
        bad.append(Violation(v.id, "gold_referral", f"gold traversal gives {out.referral}, record says {v.gold_referral}"))
    if trace.step_count != v.gold_path_length:
        bad.append(Violation(v.id, "gold_path_length", f"gold traversal takes {trace.step_count} steps, record says {v.gold_path_length}"))
    if v.gold_action is None and v.gold_referral:
        bad.append(Violation(v.id, "gold_referral", "no action cannot be a referral"))
    for reason in an.contract_failures(v):
        bad.append(Violation(v.id, "category", reason))
    if v.text:
        if word_count(v.text) != v.word_count:
            bad.append(Violation(v.id, "word_count", f"text has {word_count(v.text)} words, record says {v.word_count}"))
        if not length_ok(v.length_condition, v.word_count):
            bad.append(Violation(v.id, "length_condition", f"{v.word_count} words violates {v.length_condition}"))
        hits = banned_phrases(v.text)
        if hits:
            bad.append(Violation(v.id, "text", f"contains management phrasing {hits}"))
    return bad


# ---------------------------------------------------------------------------
# spec generation
# ---------------------------------------------------------------------------


@dataclass
class GenerationPlan:
    counts: dict[str, int]
    lengths: tuple[str, ...] = ("unconstrained",)
    seed: int = 0
    multi_positives: int = 2
    confusion_pairs: tuple[tuple[str, str], ...] = ()
    id_prefix: str | None = None

    def __post_init__(self):
        for c in self.counts:
            if c not in CATEGORIES:
                raise ValueError(f"unknown category {c!r}")
        for n in self.counts.values():
            if n < 0:
                raise ValueError("counts must be non-negative")
        for length in self.lengths:
            if length not in LENGTHS:
                raise ValueError(f"unknown length condition {length!r}")
        if self.multi_positives < 2:
            raise ValueError("multi_positives must be >= 2")

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> GenerationPlan:
        return cls(
            counts=dict(d["counts"]),
            lengths=tuple(d.get("lengths", ("unconstrained",))),
            seed=int(d.get("seed", 0)),
            multi_positives=int(d.get("multi_positives", 2)),
            confusion_pairs=tuple(tuple(p) for p in d.get("confusion_pairs", ())),
            id_prefix=d.get("id_prefix"),
        )


def _yes_subtree_features(tree: GuidanceTree, node) -> list[str]:
    pos = node.branches()[0][1]
    seen: set[str] = set()
    out: list[str] = []
    stack = [pos.ref] if pos.kind == "node" else []
    while stack:
        nid = stack.pop()
        if nid in seen:
            continue
        seen.add(nid)
        n = tree.nodes[nid]
        out.extend(n.features())
        stack.extend(t.ref for _, t in reversed(n.branches()) if t.kind == "node")
    return out


class _Candidates:
    def __init__(self, an: TreeAnalysis, plan: GenerationPlan):
        self.an = an
        self.plan = plan
        self.tree = an.tree

    def single(self) -> list[dict[str, bool]]:
        return [{f: True} for f in self.an.firing_features()]

    def multi(self) -> list[dict[str, bool]]:
        firing = self.an.firing_features()
        out = []
        for combo in itertools.combinations(firing, self.plan.multi_positives):
            acts = [self.an.individual_action(f) for f in combo]
            if None in acts or len(set(acts)) != len(acts):
                continue
            out.append({f: True for f in combo})
        return out

    def _similar(self, positives: set[str], path_features: list[str]) -> list[str]:
        order: list[str] = []
        for n in self.an.multi_nodes:
            feats = n.features()
            if positives & set(feats):
                order.extend(f for f in feats if f not in positives)
        for a, b in self.plan.confusion_pairs:
            if a in positives:
                order.append(b)
            if b in positives:
                order.append(a)
        groups = {self.an.group_of.get(p) for p in positives} - {None}
        order.extend(f for f in path_features if self.an.group_of.get(f) not in groups)
        order.extend(path_features)
        feats = self.an.features
        for p in sorted(positives, key=feats.index):
            i = feats.index(p)
            order.extend(feats[i + 1:] + feats[:i][::-1])
        return [f for f in dict.fromkeys(order) if f not in positives]

    def contrastive(self) -> list[dict[str, bool]]:
        pos_sets: list[tuple[str, ...]] = [(f,) for f in self.an.firing_features()]
        for n in self.an.multi_nodes:
            if n.threshold < len(n.criteria):
                pos_sets.extend(itertools.combinations(n.features(), n.threshold))
        for f in self.an.firing_features():
            for n in self.tree.nodes_with_feature(f):
                for g in _yes_subtree_features(self.tree, n):
                    if g != f:
                        pos_sets.append((f, g))
        out = []
        for ps in dict.fromkeys(pos_sets):
            feats = {f: True for f in ps}
            path = [q.feature_id for s in self.an.gold(feats).steps for q in s.questions]
            sim = self._similar(set(ps), path)
            if sim:
                feats[sim[0]] = False
                out.append(feats)
        return out

    def exclusion(self) -> list[list[dict[str, bool]]]:
        near = []
        for n in self.an.multi_nodes:
            if n.threshold < 2:
                continue
            feats = n.features()
            for combo in itertools.combinations(feats, n.threshold - 1):
                rest = [f for f in feats if f not in combo]
                d = {f: True for f in combo}
                d[rest[0]] = False
                near.append(d)
        denials = []
        feats = self.an.features
        for i, f in enumerate(feats):
            d = {f: False}
            if i + 1 < len(feats):
                d[feats[i + 1]] = False
            denials.append(d)
        return [near, denials]


def _labelled(an: TreeAnalysis, vid: str, category: str, features: dict[str, bool]) -> Vignette:
    trace = an.gold(features)
    o = trace.outcome
    return Vignette(
        id=vid,
        domain=an.tree.domain,
        category=category,
        features=dict(features),
        gold_action=o.action_id,
        gold_referral=o.referral,
        gold_path_length=trace.step_count,
    )


_INFEASIBLE_REASONS = {
    "single": "no feature triggers a branch on its own",
    "multi": "no two individually-triggering features with distinct actions can co-occur",
    "contrastive": "no positive/denied feature combination triggers a branch",
    "exclusion": "every path without a qualifying condition ends in a referral action",
}


def generate_specs(tree: GuidanceTree, plan: GenerationPlan) -> list[Vignette]:
    """Vignette specs (features and gold labels, empty text) per the plan.

    Candidates that fail their category contract are discarded, so every
    returned spec passes :func:`validate_vignette`.  Categories with a
    positive count but no valid candidate raise :class:`InfeasibleCategory`.
    """
    an = tree if isinstance(tree, TreeAnalysis) else TreeAnalysis(tree)
    cands = _Candidates(an, plan)
    prefix = plan.id_prefix or an.tree.domain
    specs: list[Vignette] = []
    for category in CATEGORIES:
        n = plan.counts.get(category, 0)
        if n == 0:
            continue
        rng = random.Random(derive_seed(plan.seed, category))
        raw = getattr(cands, category)()
        pools = raw if category == "exclusion" else [raw]
        valid_pools = []
        for pool in pools:
            keep = []
            for feats in pool:
                if an.exclusive_conflicts(f for f, v in feats.items() if v):
                    continue
                v = _labelled(an, "", category, feats)
                if not validate_vignette(an, v):
                    keep.append(feats)
            rng.shuffle(keep)
            if keep:
                valid_pools.append(keep)
        if not valid_pools:
            raise InfeasibleCategory(category, _INFEASIBLE_REASONS[category])
        order = [c for group in itertools.zip_longest(*valid_pools) for c in group if c is not None]
        for i in range(n):
            v = _labelled(an, f"{prefix}-{category}-{i + 1:03d}", category, order[i % len(order)])
            v.length_condition = plan.lengths[i % len(plan.lengths)]
            specs.append(v)
    return specs


# ---------------------------------------------------------------------------
# narrative synthesis
# ---------------------------------------------------------------------------


@dataclass
class FeatureTemplate:
    label: str
    affirm: list[str]
    deny: list[str]
    sex: str | None = None
    age: dict[str, tuple[int, int]] = field(default_factory=dict)


@dataclass
class TemplateSet:
    domain: str
    features: dict[str, FeatureTemplate]
    fillers: list[str]
    openings: list[str]
    sexes: tuple[str, ...] = ("male", "female")
    age_range: tuple[int, int] = (25, 80)

    def label(self, feature: str) -> str:
        t = self.features.get(feature)
        return t.label if t else feature.replace("_", " ")


def load_templates(path: str | Path) -> TemplateSet:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    feats = {}
    for fid, fd in d["features"].items():
        label = fd["label"]
        feats[fid] = FeatureTemplate(
            label=label,
            affirm=list(fd.get("affirm") or [f"The patient has {label}."]),
            deny=list(fd.get("deny") or [f"There is no evidence of {label}."]),
            sex=fd.get("sex"),
            age={k: tuple(v) for k, v in fd.get("age", {}).items()},
        )
    return TemplateSet(
        domain=d["domain"],
        features=feats,
        fillers=list(d["fillers"]),
        openings=list(d.get("openings") or ["A {age}-year-old {sex} presents to the primary care clinic."]),
        sexes=tuple(d.get("sexes", ("male", "female"))),
        age_range=tuple(d.get("age_range", (25, 80))),
    )


def synthesize_text(
    spec: Vignette,
    templates: TemplateSet,
    length_condition: str | None = None,
    seed: int = 0,
) -> str:
    """Deterministic narrative asserting positives and denying negated features.

    Neutral filler sentences pad the note to the length condition.
    """
    cond = length_condition or spec.length_condition
    rng = random.Random(derive_seed(seed, spec.id))
    missing = [f for f in spec.features if f not in templates.features]
    if missing:
        raise MissingTemplate(f"no template for features {sorted(missing)}")

    sexes = list(templates.sexes)
    lo, hi = templates.age_range
    for fid, tpl in templates.features.items():
        state = "true" if spec.features.get(fid) else "false"
        if tpl.sex and spec.features.get(fid):
            sexes = [s for s in sexes if s == tpl.sex]
        if state in tpl.age:
            lo, hi = max(lo, tpl.age[state][0]), min(hi, tpl.age[state][1])
    if not sexes or lo > hi:
        raise LengthInfeasible(f"{spec.id}: contradictory demographic constraints")
    sex = rng.choice(sexes)
    opening = rng.choice(templates.openings).format(age=rng.randint(lo, hi), sex=sex)
    opening = re.sub(r"\bA (8\d|11|18)-", r"An \1-", opening)

    body = []
    for fid in sorted(spec.features):
        tpl = templates.features[fid]
        body.append(rng.choice(tpl.affirm if spec.features[fid] else tpl.deny))
    rng.shuffle(body)
    fillers = list(templates.fillers)
    rng.shuffle(fillers)

    def words(sentences):
        return sum(word_count(s) for s in sentences)

    chosen: list[str] = []
    base = words([opening] + body)
    if cond == "short":
        if base > SHORT_MAX:
            raise LengthInfeasible(f"{spec.id}: {base} words of required content exceed {SHORT_MAX}")
        for s in fillers[: rng.randint(0, 2)]:
            if base + words(chosen) + word_count(s) <= SHORT_MAX:
                chosen.append(s)
    elif cond in ("medium", "long"):
        target = SHORT_MAX + 1 if cond == "medium" else LONG_MIN
        if cond == "medium" and base >= LONG_MIN:
            raise LengthInfeasible(f"{spec.id}: {base} words of required content exceed medium range")
        if not fillers:
            raise LengthInfeasible("template set has no filler sentences")
        pool = itertools.cycle(fillers)
        while base + words(chosen) < target:
            chosen.append(next(pool))
        if cond == "medium" and base + words(chosen) >= LONG_MIN:
            raise LengthInfeasible(f"{spec.id}: cannot land strictly between {SHORT_MAX} and {LONG_MIN} words")
    else:
        chosen = fillers[: rng.randint(1, 6)]

    middle = body + chosen
    rng.shuffle(middle)
    text = " ".join([opening] + middle)

    for fid, present in spec.features.items():
        tpl = templates.features[fid]
        if not any(s in text for s in (tpl.affirm if present else tpl.deny)):
            raise AssertionError(f"{spec.id}: synthesized text lost feature {fid}")
    hits = banned_phrases(text)
    if hits:
        raise ValueError(f"{spec.id}: template produced management phrasing {hits}")
    if not length_ok(cond, word_count(text)):
        raise LengthInfeasible(f"{spec.id}: {word_count(text)} words violates {cond}")
    return text


def realize(spec: Vignette, templates: TemplateSet, seed: int = 0) -> Vignette:
    text = synthesize_text(spec, templates, seed=seed)
    return replace(spec, text=text, word_count=word_count(text))


class KeywordOracle:
    """Answers yes iff an affirmation sentence for the feature occurs in the text."""

    def __init__(self, text: str, templates: TemplateSet):
        self.text = text
        self.templates = templates

    def ask(self, q: Question) -> Answer:
        tpl = self.templates.features.get(q.feature_id)
        if tpl is not None and any(s in self.text for s in tpl.affirm):
            return YES
        return NO

    def descriptor(self) -> dict[str, Any]:
        return _descriptor("keyword", {"domain": self.templates.domain})


# ---------------------------------------------------------------------------
# generation prompts for external text models
# ---------------------------------------------------------------------------

_CATEGORY_TEXT = {
    "single": (
        "single-criteria",
        "The note must contain exactly one clear positive condition: the positive feature listed above.",
    ),
    "multi": (
        "multi-criteria",
        "The note must contain all of the positive features listed above at the same time, each described clearly enough to stand on its own.",
    ),
    "contrastive": (
        "contrastive-criteria",
        "Include every positive feature and explicitly exclude every negated feature, so that a reader can distinguish this case from the similar condition that is absent.",
    ),
    "exclusion": (
        "exclusion-criteria",
        "The patient must not have any of the conditions of interest for this guideline. Any positive findings listed above must stay below the diagnostic threshold; do not add other qualifying findings.",
    ),
}

_LENGTH_TEXT = {
    "unconstrained": "No length constraint.",
    "short": f"Keep the note to at most {SHORT_MAX} words.",
    "medium": f"The note must be longer than {SHORT_MAX} words and shorter than {LONG_MIN} words.",
    "long": f"The note must be at least {LONG_MIN} words long.",
}


def emit_generation_prompt(spec: Vignette, labels: Mapping[str, str] | TemplateSet | None = None) -> str:
    """Self-contained prompt asking a text model to write the vignette for ``spec``."""
    if isinstance(labels, TemplateSet):
        name = labels.label
    else:
        lab = dict(labels or {})

        def name(f):
            return lab.get(f, f.replace("_", " "))

    cat_name, cat_rule = _CATEGORY_TEXT[spec.category]
    pos = [f"- {name(f)}" for f in spec.positives] or ["- (none)"]
    neg = [f"- {name(f)}" for f in spec.negatives] or ["- (none)"]
    lines = [
        f"# prompt version: {PROMPT_VERSION}",
        "Write a synthetic primary care clinical note (patient vignette) for testing a guideline-based decision support system.",
        "",
        f"Domain: {spec.domain.replace('_', ' ')}",
        f"Vignette category: {cat_name}",
        "",
        "Positive features (must be clearly present in the note):",
        *pos,
        "",
        "Negated features (must be explicitly denied or documented as absent):",
        *neg,
        "",
        f"Category instructions: {cat_rule}",
        "",
        "Realism: write it like a real primary care note, with patient demographics, symptom description, "
        "physical examination findings and relevant medical history. Do not name the guideline.",
        "Do not provide any explicit management recommendations, referrals, diagnoses to act on, or treatment plans.",
        f"Length: {_LENGTH_TEXT[spec.length_condition]}",
        "",
        "Return only the note text.",
    ]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# corpus files
# ---------------------------------------------------------------------------


@dataclass
class CorpusManifest:
    domain: str
    tree_path: str
    tree_hash: str
    tree: GuidanceTree
    vignettes: list[Vignette]

    @property
    def category_counts(self) -> dict[str, int]:
        return category_counts(self.vignettes)

    @property
    def referral_counts(self) -> dict[str, int]:
        return referral_counts(self.vignettes)

    def by_id(self) -> dict[str, Vignette]:
        return {v.id: v for v in self.vignettes}


def category_counts(vignettes: Iterable[Vignette]) -> dict[str, int]:
    c = Counter(v.category for v in vignettes)
    return {k: c.get(k, 0) for k in CATEGORIES}


def referral_counts(vignettes: Iterable[Vignette]) -> dict[str, int]:
    vs = list(vignettes)
    ref = sum(v.gold_referral for v in vs)
    return {"referral": ref, "non_referral": len(vs) - ref}


def corpus_header(domain: str, tree_ref: str, tree: GuidanceTree, vignettes: Sequence[Vignette]) -> dict[str, Any]:
    return {
        "format": FORMAT,
        "domain": domain,
        "tree": tree_ref,
        "tree_hash": tree_hash(tree),
        "category_counts": category_counts(vignettes),
        "referral_counts": referral_counts(vignettes),
    }


def write_corpus(path: str | Path, tree_ref: str, tree: GuidanceTree, vignettes: Sequence[Vignette]) -> None:
    lines = [json.dumps(corpus_header(tree.domain, tree_ref, tree, vignettes), sort_keys=True)]
    lines += [json.dumps(v.to_json(), sort_keys=True, ensure_ascii=False) for v in vignettes]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_corpus(path: str | Path, tree: GuidanceTree | None = None) -> CorpusManifest:
    """Load a JSONL corpus and check every record; raises CorpusError listing all violations."""
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        rows = [(i + 1, line) for i, line in enumerate(fh) if line.strip()]
    if not rows:
        raise CorpusError([Violation("<header>", "format", "empty corpus file")])
    try:
        header = json.loads(rows[0][1])
    except json.JSONDecodeError as exc:
        raise CorpusError([Violation("<header>", "format", f"malformed header: {exc}")]) from exc
    if not isinstance(header, dict) or header.get("format") != FORMAT:
        raise CorpusError([Violation("<header>", "format", f"expected format {FORMAT!r}")])
    tree_ref = header.get("tree", "")
    if tree is None:
        if not tree_ref:
            raise CorpusError([Violation("<header>", "tree", "no tree reference and no tree given")])
        tree = load_tree(path.parent / tree_ref)
    bad: list[Violation] = []
    if header.get("tree_hash") not in (None, tree_hash(tree)):
        bad.append(Violation("<header>", "tree_hash", "tree content does not match the corpus header"))
    if header.get("domain") != tree.domain:
        bad.append(Violation("<header>", "domain", f"corpus domain {header.get('domain')!r} != tree domain {tree.domain!r}"))

    an = TreeAnalysis(tree)
    vignettes: list[Vignette] = []
    seen: set[str] = set()
    for lineno, line in rows[1:]:
        try:
            d = json.loads(line)
        except json.JSONDecodeError as exc:
            bad.append(Violation(f"<line {lineno}>", "record", f"malformed JSON: {exc}"))
            continue
        try:
            v = vignette_from_json(d)
        except CorpusError as exc:
            bad.extend(exc.violations)
            continue
        if v.id in seen:
            bad.append(Violation(v.id, "id", "duplicate vignette id"))
        seen.add(v.id)
        if v.domain != tree.domain:
            bad.append(Violation(v.id, "domain", f"{v.domain!r} != tree domain {tree.domain!r}"))
        if word_count(v.text) != v.word_count:
            bad.append(Violation(v.id, "word_count", f"text has {word_count(v.text)} words, record says {v.word_count}"))
        bad.extend(x for x in validate_vignette(an, v) if x.field != "word_count")
        vignettes.append(v)
    for key, fn in (("category_counts", category_counts), ("referral_counts", referral_counts)):
        if key in header and header[key] != fn(vignettes):
            bad.append(Violation("<header>", key, f"header {header[key]} != recomputed {fn(vignettes)}"))
    if bad:
        raise CorpusError(bad)
    return CorpusManifest(tree.domain, str(tree_ref), tree_hash(tree), tree, vignettes)


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------


@dataclass
class CorpusStats:
    domain: str
    n_vignettes: int
    avg_word_count: float | None
    n_actions: int
    category_counts: dict[str, int]
    referral: int
    non_referral: int


def corpus_stats(manifest: CorpusManifest) -> CorpusStats:
    vs = manifest.vignettes
    avg = round(sum(v.word_count for v in vs) / len(vs), 1) if vs else None
    refs = referral_counts(vs)
    return CorpusStats(
        manifest.domain,
        len(vs),
        avg,
        len(manifest.tree.actions),
        category_counts(vs),
        refs["referral"],
        refs["non_referral"],
    )


_CATEGORY_ROWS = [
    ("single", "Single-criteria"),
    ("contrastive", "Contrastive-criteria"),
    ("multi", "Multi-criteria"),
    ("exclusion", "Exclusion-criteria"),
]


def _stats_rows(stats: Sequence[CorpusStats]) -> list[tuple[str, list[str]]]:
    def na(n):
        return str(n) if n else "NA"

    rows = [
        ("#Vignettes", [str(s.n_vignettes) for s in stats]),
        ("Avg. Word Count", ["NA" if s.avg_word_count is None else f"{s.avg_word_count:.1f}" for s in stats]),
        ("#Actions", [str(s.n_actions) for s in stats]),
    ]
    rows += [(label, [na(s.category_counts[c]) for s in stats]) for c, label in _CATEGORY_ROWS]
    rows += [
        ("Referral", [na(s.referral) for s in stats]),
        ("Non-Referral", [na(s.non_referral) for s in stats]),
    ]
    return rows


def render_stats_markdown(stats: Sequence[CorpusStats]) -> str:
    head = "| | " + " | ".join(s.domain for s in stats) + " |"
    sep = "|---|" + "---:|" * len(stats)
    body = [f"| {label} | " + " | ".join(vals) + " |" for label, vals in _stats_rows(stats)]
    return "\n".join([head, sep, *body]) + "\n"


def render_stats_csv(stats: Sequence[CorpusStats]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["statistic", *[s.domain for s in stats]])
    for label, vals in _stats_rows(stats):
        w.writerow([label, *vals])
    return buf.getvalue()
