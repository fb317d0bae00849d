import json
import random
import subprocess
import sys
from dataclasses import replace
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import guidetree
from guidetree.corpus import (
    CATEGORIES,
    CorpusError,
    CorpusManifest,
    GenerationPlan,
    InfeasibleCategory,
    KeywordOracle,
    LengthInfeasible,
    MissingTemplate,
    TreeAnalysis,
    Vignette,
    banned_phrases,
    corpus_stats,
    emit_generation_prompt,
    generate_specs,
    length_ok,
    load_corpus,
    realize,
    render_stats_csv,
    render_stats_markdown,
    synthesize_text,
    validate_vignette,
    word_count,
    write_corpus,
)
from guidetree.engine import traverse
from guidetree.tree import GuidanceTree, SimpleNode, Target, ActionDef, load_tree
from helpers import random_tree

ROOT = Path(__file__).resolve().parents[1]


def _all(n=10):
    return {c: n for c in CATEGORIES}


# ---- word counts and length conditions -----------------------------------


def test_word_count_whitespace():
    assert word_count("a  b\n c\td ") == 4
    assert word_count("") == 0


@pytest.mark.parametrize(
    "cond, words, ok",
    [
        ("short", 100, True), ("short", 101, False),
        ("medium", 100, False), ("medium", 101, True), ("medium", 199, True), ("medium", 200, False),
        ("long", 199, False), ("long", 200, True),
        ("unconstrained", 0, True), ("unconstrained", 10_000, True),
    ],
)
def test_length_boundaries(cond, words, ok):
    assert length_ok(cond, words) is ok


def test_length_conditions_partition():
    for n in range(0, 400):
        assert sum(length_ok(c, n) for c in ("short", "medium", "long")) == 1


def test_banned_phrases():
    assert banned_phrases("She should be referred to neurology.")
    assert not banned_phrases("She denies fever.")


# ---- contracts and generation --------------------------------------------


def test_single_plan_covers_each_simple_feature():
    n = 4
    nodes = {}
    for i in range(n):
        nxt = Target.node(f"n{i + 1}") if i + 1 < n else Target.end()
        nodes[f"n{i}"] = SimpleNode(f"n{i}", f"f{i}", f"F{i}?", Target.action(f"a{i}"), nxt)
    t = GuidanceTree("d", "n0", nodes, {f"a{i}": ActionDef(f"a{i}", f"A{i}", True) for i in range(n)})
    specs = generate_specs(t, GenerationPlan({"single": n}))
    assert len(specs) == n
    assert sorted(s.positives[0] for s in specs) == [f"f{i}" for i in range(n)]
    assert all(len(s.features) == 1 for s in specs)


def test_exclusion_near_miss_on_example_tree(five_node):
    v = Vignette("x", five_node.domain, "exclusion", features={"nausea": True, "photophobia": False})
    an = TreeAnalysis(five_node)
    trace = an.gold(v.features)
    assert trace.steps[3].branch == "not_met"
    assert trace.outcome.action_id is None
    v = replace(v, gold_action=None, gold_referral=False, gold_path_length=trace.step_count)
    assert validate_vignette(an, v) == []


def test_example_tree_generates_all_categories(five_node):
    specs = generate_specs(five_node, GenerationPlan(_all(6), seed=4))
    an = TreeAnalysis(five_node)
    assert {s.category for s in specs} == set(CATEGORIES)
    assert any(
        s.category == "exclusion" and len(s.positives) == 1 and s.positives[0] in ("nausea", "photophobia", "disabling")
        for s in specs
    )
    for s in specs:
        assert validate_vignette(an, s) == []


def test_multi_gold_is_highest_priority_action(five_node):
    an = TreeAnalysis(five_node)
    for s in generate_specs(five_node, GenerationPlan({"multi": 10}, seed=2)):
        acts = {an.individual_action(f) for f in s.positives}
        assert s.gold_action == min(acts, key=an.priority)


def test_lab_threshold_fixture_multi_infeasible(fixtures_dir):
    t = load_tree(fixtures_dir / "lab_threshold_only.json")
    with pytest.raises(InfeasibleCategory) as exc:
        generate_specs(t, GenerationPlan({"multi": 5}))
    assert exc.value.category == "multi"
    assert generate_specs(t, GenerationPlan({"single": 3, "contrastive": 3, "exclusion": 3}))


def test_always_action_fixture_exclusion_infeasible(fixtures_dir):
    t = load_tree(fixtures_dir / "always_action.json")
    with pytest.raises(InfeasibleCategory) as exc:
        generate_specs(t, GenerationPlan({"exclusion": 5}))
    assert exc.value.category == "exclusion"


def test_generation_deterministic(shipped_trees):
    t = shipped_trees["headache"]
    a = generate_specs(t, GenerationPlan(_all(), seed=5))
    b = generate_specs(t, GenerationPlan(_all(), seed=5))
    c = generate_specs(t, GenerationPlan(_all(), seed=6))
    assert [v.to_json() for v in a] == [v.to_json() for v in b]
    assert [v.to_json() for v in a] != [v.to_json() for v in c]


def test_contrastive_prefers_sibling_criteria(five_node):
    for s in generate_specs(five_node, GenerationPlan({"contrastive": 20}, seed=1)):
        if set(s.positives) <= {"nausea", "photophobia", "disabling"}:
            assert set(s.negatives) <= {"nausea", "photophobia", "disabling"}


def test_confusion_pairs_used(five_node):
    plan = GenerationPlan({"contrastive": 50}, confusion_pairs=(("thunderclap", "medication_overuse"),))
    specs = generate_specs(five_node, plan)
    assert any(s.positives == ["thunderclap"] and s.negatives == ["medication_overuse"] for s in specs)


def test_validate_vignette_flags_wrong_gold(five_node):
    an = TreeAnalysis(five_node)
    v = Vignette("v", five_node.domain, "single", features={"thunderclap": True},
                 gold_action="migraine", gold_referral=True, gold_path_length=1)
    fields = {x.field for x in validate_vignette(an, v)}
    assert "gold_action" in fields
    v2 = replace(v, category="multi", gold_action="ed")
    assert "category" in {x.field for x in validate_vignette(an, v2)}


def _closure_check(tree, seed):
    an = TreeAnalysis(tree)
    produced = 0
    for cat in CATEGORIES:
        try:
            specs = generate_specs(an, GenerationPlan({cat: 8}, seed=seed))
        except InfeasibleCategory:
            continue
        for s in specs:
            assert validate_vignette(an, s) == [], (s.to_json(), validate_vignette(an, s))
            assert an.categories_satisfied(s) == [cat]
            produced += 1
    return produced


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 1000))
def test_generator_validator_closure_random_trees(tree_seed, seed):
    _closure_check(random_tree(random.Random(tree_seed)), seed)


def test_shipped_corpora_partition_categories(shipped_manifests):
    for m in shipped_manifests.values():
        an = TreeAnalysis(m.tree)
        for v in m.vignettes:
            assert an.categories_satisfied(v) == [v.category]


# ---- narrative synthesis -------------------------------------------------


def _spec(feats, length="unconstrained", vid="t-1", category="single"):
    return Vignette(vid, "headache", category, length, features=feats)


def test_short_single_contains_affirmation(shipped_templates):
    tpl = shipped_templates["headache"]
    text = synthesize_text(_spec({"thunderclap": True}, "short"), tpl, seed=1)
    assert word_count(text) <= 100
    assert any(s in text for s in tpl.features["thunderclap"].affirm)


def test_denial_phrasing_present(shipped_templates):
    tpl = shipped_templates["headache"]
    text = synthesize_text(_spec({"thunderclap": True, "focal_signs": False}, category="contrastive"), tpl)
    assert any(s in text for s in tpl.features["focal_signs"].deny)
    assert not any(s in text for s in tpl.features["focal_signs"].affirm)


def test_synthesis_deterministic(shipped_templates):
    tpl = shipped_templates["headache"]
    s = _spec({"thunderclap": True}, "long")
    assert synthesize_text(s, tpl, seed=3) == synthesize_text(s, tpl, seed=3)
    assert synthesize_text(s, tpl, seed=3) != synthesize_text(s, tpl, seed=4)


@pytest.mark.parametrize("cond", ["short", "medium", "long", "unconstrained"])
def test_length_conditions_honoured(shipped_templates, cond):
    tpl = shipped_templates["low_back_pain"]
    for i, f in enumerate(sorted(tpl.features)):
        text = synthesize_text(Vignette(f"x{i}", "low_back_pain", "single", cond, features={f: True}), tpl, seed=i)
        assert length_ok(cond, word_count(text))
        assert not banned_phrases(text)


def test_missing_template(shipped_templates):
    with pytest.raises(MissingTemplate):
        synthesize_text(_spec({"no_such_feature": True}), shipped_templates["headache"])


def test_length_infeasible(shipped_templates):
    tpl = shipped_templates["headache"]
    long_sentence = " ".join(["word"] * 150) + "."
    big = replace(tpl, features={**tpl.features, "thunderclap": replace(tpl.features["thunderclap"], affirm=[long_sentence])})
    with pytest.raises(LengthInfeasible):
        synthesize_text(_spec({"thunderclap": True}, "short"), big)


def test_keyword_oracle_recovers_gold(shipped_manifests, shipped_templates):
    for d, m in shipped_manifests.items():
        tpl = shipped_templates[d]
        for v in m.vignettes:
            out, trace = traverse(m.tree, KeywordOracle(v.text, tpl), vignette_id=v.id)
            assert out.action_id == v.gold_action, v.id
            assert trace.step_count == v.gold_path_length


def test_demographics_respect_feature_constraints(shipped_manifests):
    for v in shipped_manifests["prostate_cancer"].vignettes:
        assert "female" not in v.text and " woman" not in v.text


# ---- prompts -------------------------------------------------------------


def test_prompt_single(shipped_templates):
    tpl = shipped_templates["headache"]
    p = emit_generation_prompt(_spec({"thunderclap": True}), tpl)
    assert tpl.label("thunderclap") in p
    assert "management recommendations" in p


def test_prompt_contrastive_lists_both_sides(shipped_templates):
    tpl = shipped_templates["headache"]
    p = emit_generation_prompt(_spec({"thunderclap": True, "focal_signs": False}, category="contrastive"), tpl)
    pos, neg = p.split("Negated features")
    assert tpl.label("thunderclap") in pos and tpl.label("focal_signs") in neg


def test_prompt_exclusion(shipped_templates):
    p = emit_generation_prompt(_spec({"thunderclap": False}, category="exclusion"), shipped_templates["headache"])
    assert "must not have any of the conditions" in p


def test_prompt_length_instruction():
    p = emit_generation_prompt(_spec({"x": True}, "medium"))
    assert "longer than 100 words and shorter than 200 words" in p


# ---- corpus files --------------------------------------------------------


def _small_corpus(tmp_path, five_node, shipped_templates):
    tree_file = tmp_path / "tree.json"
    tree_file.write_bytes(guidetree.tree_path("headache").read_bytes())
    t = load_tree(tree_file)
    specs = generate_specs(t, GenerationPlan({"single": 3, "exclusion": 2}, seed=1))
    vs = [realize(s, shipped_templates["headache"], 1) for s in specs]
    path = tmp_path / "c.jsonl"
    write_corpus(path, "tree.json", t, vs)
    return path, t, vs


def test_corpus_round_trip(tmp_path, five_node, shipped_templates):
    path, t, vs = _small_corpus(tmp_path, five_node, shipped_templates)
    m = load_corpus(path)
    assert [v.to_json() for v in m.vignettes] == [v.to_json() for v in vs]
    header = json.loads(path.read_text().splitlines()[0])
    assert header["format"] == "cpg-corpus/1" and header["tree_hash"].startswith("sha256:")


def test_corpus_rejects_tree_drift(tmp_path, five_node, shipped_templates):
    path, t, vs = _small_corpus(tmp_path, five_node, shipped_templates)
    doc = json.loads((tmp_path / "tree.json").read_text())
    doc["actions"]["ed_sah"]["label"] += " now"
    (tmp_path / "tree.json").write_text(json.dumps(doc))
    with pytest.raises(CorpusError) as exc:
        load_corpus(path)
    assert "tree_hash" in {v.field for v in exc.value.violations}


def test_corpus_rejects_bad_records(tmp_path, five_node, shipped_templates):
    path, t, vs = _small_corpus(tmp_path, five_node, shipped_templates)
    lines = path.read_text().splitlines()
    rec = json.loads(lines[1])
    rec["word_count"] += 1
    rec["gold_action"] = "ed_co" if rec["gold_action"] != "ed_co" else "ed_focal"
    lines[1] = json.dumps(rec)
    lines.append(lines[2])
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(CorpusError) as exc:
        load_corpus(path)
    fields = {v.field for v in exc.value.violations}
    assert {"word_count", "gold_action", "id", "category_counts"} <= fields


def test_stats_average_from_word_counts(five_node):
    vs = [Vignette("a", "headache_mini", "single", word_count=100), Vignette("b", "headache_mini", "single", word_count=181)]
    s = corpus_stats(CorpusManifest("headache_mini", "", "", five_node, vs))
    assert s.avg_word_count == 140.5 and s.n_vignettes == 2 and s.n_actions == 5


def test_stats_empty_corpus(five_node):
    s = corpus_stats(CorpusManifest("headache_mini", "", "", five_node, []))
    assert s.n_vignettes == 0 and s.avg_word_count is None
    md = render_stats_markdown([s])
    assert "| Avg. Word Count | NA |" in md


def test_shipped_stats_table(shipped_manifests):
    stats = [corpus_stats(shipped_manifests[d]) for d in guidetree.DOMAINS]
    h, lbp, pc = stats
    assert (h.n_vignettes, lbp.n_vignettes, pc.n_vignettes) == (128, 99, 96)
    assert h.category_counts == {"single": 36, "contrastive": 32, "multi": 30, "exclusion": 30}
    assert lbp.category_counts["exclusion"] == 0 and pc.category_counts["multi"] == 0
    assert lbp.non_referral == 0
    assert (h.n_actions, lbp.n_actions, pc.n_actions) == (24, 7, 11)
    md = render_stats_markdown(stats)
    assert "| Multi-criteria | 30 | 33 | NA |" in md
    assert "| Exclusion-criteria | 30 | NA | 5 |" in md
    assert render_stats_csv(stats).startswith("statistic,headache,low_back_pain,prostate_cancer\n")


def test_shipped_corpora_are_current():
    r = subprocess.run([sys.executable, str(ROOT / "scripts" / "make_corpora.py"), "--check"], capture_output=True, text=True)
    assert r.returncode == 0, r.stdout + r.stderr
