import io
import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from guidetree.engine import (
    NO_ACTION,
    MismatchedVignette,
    StepLimitExceeded,
    Trace,
    TraceWriter,
    TraversalAborted,
    gold_trace,
    read_traces,
    render_trace,
    replay,
    traversal_difference,
    traverse,
    write_traces,
)
from guidetree.oracle import Answer, ConstantOracle, OracleTimeout, ScriptedOracle
from guidetree.tree import validate_tree
from helpers import CoinOracle, random_tree, valid_trees


class CountingOracle(ScriptedOracle):
    def __init__(self, features):
        super().__init__(features)
        self.asked = []

    def ask(self, q):
        self.asked.append(q)
        return super().ask(q)


class FailingOracle:
    def __init__(self, after):
        self.after = after
        self.n = 0

    def ask(self, q):
        if self.n >= self.after:
            raise OracleTimeout("endpoint went quiet")
        self.n += 1
        return Answer(False)

    def descriptor(self):
        return {"backend": "failing", "config_hash": "x", "prompt_version": None}


def test_first_yes_fires_action(five_node):
    out, trace = traverse(five_node, ScriptedOracle({"thunderclap": True}))
    assert out.action_id == "ed" and out.referral
    assert trace.step_count == 1 and trace.query_count == 1
    assert trace.steps[0].branch == "yes"


def test_multi_node_asks_every_criterion(five_node):
    o = CountingOracle({"nausea": True, "photophobia": True, "disabling": True})
    out, trace = traverse(five_node, o)
    assert out.action_id == "migraine" and not out.referral
    step = trace.steps[3]
    assert step.kind == "multi" and len(step.questions) == 3 and step.branch == "met"
    assert [q.criterion_index for q in step.questions] == [0, 1, 2]
    assert trace.step_count == 4 and trace.query_count == 6


def test_below_threshold_takes_not_met(five_node):
    _, trace = traverse(five_node, ScriptedOracle({"nausea": True}))
    assert trace.steps[3].branch == "not_met"
    assert trace.outcome == NO_ACTION
    assert trace.step_count == 5


def test_all_no_reaches_end(five_node):
    out, trace = traverse(five_node, ConstantOracle(False))
    assert out == NO_ACTION and not out.is_action
    assert [s.node_id for s in trace.steps] == ["n1", "n2", "n3", "n4", "n5"]


def test_abort_keeps_partial_trace(five_node):
    with pytest.raises(TraversalAborted) as exc:
        traverse(five_node, FailingOracle(after=2), vignette_id="v1")
    t = exc.value.trace
    assert t.aborted and "OracleTimeout" in t.error
    assert t.step_count == 2 and t.outcome is None
    assert isinstance(exc.value.cause, OracleTimeout)


def test_step_limit(five_node):
    with pytest.raises(StepLimitExceeded):
        traverse(five_node, ConstantOracle(False), max_steps=3)


def test_gold_trace_uses_gold_backend(five_node):
    t = gold_trace(five_node, {"focal_signs": True}, "v")
    assert t.oracle_descriptor["backend"] == "gold"
    assert t.outcome.action_id == "urgent_neuro" and t.step_count == 2


def test_trace_json_round_trip_and_replay(five_node):
    _, t = traverse(five_node, CoinOracle(3), vignette_id="v9")
    d = json.loads(t.to_jsonl())
    assert d["step_count"] == t.step_count and d["query_count"] == t.query_count
    back = Trace.from_json(d)
    assert back.to_jsonl() == t.to_jsonl()
    _, again = replay(five_node, back)
    assert again.to_jsonl() == t.to_jsonl()


def test_trace_file_round_trip(tmp_path, five_node):
    traces = [traverse(five_node, CoinOracle(s), vignette_id=f"v{s}")[1] for s in range(5)]
    write_traces(tmp_path / "t.jsonl", traces)
    assert [t.to_jsonl() for t in read_traces(tmp_path / "t.jsonl")] == [t.to_jsonl() for t in traces]


def test_trace_writer_threadsafe(five_node):
    import threading

    buf = io.StringIO()
    w = TraceWriter(buf)
    _, t = traverse(five_node, ConstantOracle(False), vignette_id="x")

    def work():
        for _ in range(50):
            w.write(t)

    ths = [threading.Thread(target=work) for _ in range(4)]
    for th in ths:
        th.start()
    for th in ths:
        th.join()
    lines = buf.getvalue().splitlines()
    assert len(lines) == 200 and all(line == t.to_jsonl() for line in lines)


def test_step_count_tamper_detected(five_node):
    _, t = traverse(five_node, ConstantOracle(False))
    d = t.to_json()
    d["step_count"] = 1
    with pytest.raises(ValueError):
        Trace.from_json(d)


def test_traversal_difference(five_node):
    _, pred = traverse(five_node, ConstantOracle(True), vignette_id="v")
    gold = gold_trace(five_node, {"medication_overuse": True}, "v")
    assert traversal_difference(pred, gold) == 1 - 5
    other = gold_trace(five_node, {}, "w")
    with pytest.raises(MismatchedVignette):
        traversal_difference(pred, other)


def test_render_trace_two_steps(five_node):
    _, t = traverse(five_node, ScriptedOracle({"focal_signs": True}), vignette_id="v2")
    text = render_trace(t)
    assert "step 0: n1" in text and "step 1: n2" in text
    assert "A: no" in text and "A: yes" in text
    assert "branch no" in text and "branch yes" in text
    assert "urgent_neuro" in text


def test_always_yes_stops_at_root(shipped_trees):
    for t in shipped_trees.values():
        _, trace = traverse(t, ConstantOracle(True))
        assert trace.step_count == 1


@settings(max_examples=200, deadline=None)
@given(valid_trees(), st.integers(0, 2**32), st.floats(0, 1))
def test_valid_trees_always_terminate(tree, seed, p):
    assert validate_tree(tree).ok
    out, trace = traverse(tree, CoinOracle(seed, p))
    assert trace.step_count <= len(tree.nodes)
    assert out.action_id is None or out.action_id in tree.actions
    for s in trace.steps:
        assert s.node_id in tree.nodes
    _, again = replay(tree, trace)
    assert again.to_jsonl() == trace.to_jsonl()


def test_path_length_bounded_on_random_trees():
    rng = random.Random(11)
    for _ in range(100):
        t = random_tree(rng)
        for s in range(5):
            _, trace = traverse(t, CoinOracle(s))
            assert 1 <= trace.step_count <= len(t.nodes)
