"""Shared test utilities: random valid trees and random answerers."""

from __future__ import annotations

import random

from hypothesis import strategies as st

from guidetree.oracle import Answer, Question, _descriptor
from guidetree.tree import (
    ActionDef,
    Criterion,
    GuidanceTree,
    MultiNode,
    SimpleNode,
    Target,
)


def random_tree(rng: random.Random, max_nodes: int = 12, max_actions: int = 6) -> GuidanceTree:
    """A valid tree: a negative spine n0 -> n1 -> ... keeps every node reachable,
    positive branches jump forward to any later node, an action, or end."""
    k = rng.randint(1, max_nodes)
    n_actions = rng.randint(1, max_actions)
    actions = {
        f"a{i}": ActionDef(f"a{i}", f"action {i}", rng.random() < 0.6) for i in range(n_actions)
    }
    aids = sorted(actions)
    features = [f"f{i}" for i in range(3 * k + 4)]

    def fresh_feature(used: set[str]) -> str:
        pool = [f for f in features if f not in used]
        return rng.choice(pool)

    def pos_target(i: int) -> Target:
        r = rng.random()
        if r < 0.6 or i == 0:
            return Target.action(rng.choice(aids))
        if r < 0.85 and i + 1 < k:
            return Target.node(f"n{rng.randint(i + 1, k - 1)}")
        return Target.end()

    nodes = {}
    for i in range(k):
        pos = pos_target(i)
        if i + 1 < k:
            neg = Target.node(f"n{i + 1}")
        else:
            neg = Target.action(rng.choice(aids)) if rng.random() < 0.5 else Target.end()
        if rng.random() < 0.3:
            m = rng.randint(1, 4)
            used: set[str] = set()
            crit = []
            for _ in range(m):
                f = fresh_feature(used)
                used.add(f)
                crit.append(Criterion(f, f"Is {f} present (node {i})?"))
            nodes[f"n{i}"] = MultiNode(f"n{i}", tuple(crit), rng.randint(1, m), pos, neg)
        else:
            f = rng.choice(features)
            nodes[f"n{i}"] = SimpleNode(f"n{i}", f, f"Is {f} present (node {i})?", pos, neg)
    return GuidanceTree("random", "n0", nodes, actions)


@st.composite
def valid_trees(draw, max_nodes: int = 12):
    seed = draw(st.integers(min_value=0, max_value=2**32 - 1))
    return random_tree(random.Random(seed), max_nodes=max_nodes)


class CoinOracle:
    """Seeded random yes/no answers with a fixed probability of yes."""

    def __init__(self, seed: int, p_yes: float = 0.5):
        self.rng = random.Random(seed)
        self.p_yes = p_yes
        self.calls = 0

    def ask(self, q: Question) -> Answer:
        self.calls += 1
        return Answer(self.rng.random() < self.p_yes)

    def descriptor(self):
        return _descriptor("coin", {"p_yes": self.p_yes})


def brute_macro(pred, gold):
    """Independent reference: explicit loops, no shared helpers."""
    classes = set(pred) | set(gold)
    ps, rs, fs = [], [], []
    for c in classes:
        tp = sum(1 for p, g in zip(pred, gold) if p == c and g == c)
        fp = sum(1 for p, g in zip(pred, gold) if p == c and g != c)
        fn = sum(1 for p, g in zip(pred, gold) if p != c and g == c)
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        ps.append(p)
        rs.append(r)
        fs.append(f)
    n = len(classes)
    return sum(ps) / n, sum(rs) / n, sum(fs) / n
