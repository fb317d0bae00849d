"""Decision-quality metrics: binary referral, macro-averaged multi-class,
stratified tables, multi-run aggregation and traversal-length distributions.

Conventions: any 0/0 in precision, recall or F1 is 0; macro averages run
over the classes that occur in the golds or predictions of the slice being
scored; run-to-run spread is the sample standard deviation (n - 1).
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from collections.abc import Hashable, Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from .corpus import CATEGORIES, LENGTHS, Vignette
from .engine import MismatchedVignette, Outcome, Trace, gold_trace, traversal_difference
from .tree import GuidanceTree

NO_ACTION_LABEL = "<no action>"

METADATA = {
    "std": "sample standard deviation (divisor n-1; 0 for a single run)",
    "zero_division": "0/0 in precision, recall or F1 is reported as 0",
    "macro_classes": "classes present in golds or predictions of the scored slice",
    "aborted": "aborted traversals are excluded from all metrics and counted separately",
}


class MissingPrediction(KeyError):
    pass


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _div(a: float, b: float) -> float:
    return a / b if b else 0.0


def prf(c: ConfusionCounts) -> tuple[float, float, float]:
    p = _div(c.tp, c.tp + c.fp)
    r = _div(c.tp, c.tp + c.fn)
    return p, r, _div(2 * p * r, p + r)


def outcome_label(o: Outcome | None) -> str:
    return NO_ACTION_LABEL if o is None or o.action_id is None else o.action_id


def gold_label(v: Vignette) -> str:
    return NO_ACTION_LABEL if v.gold_action is None else v.gold_action


def binary_confusion(predictions: Mapping[str, Outcome], golds: Iterable[Vignette]) -> ConfusionCounts:
    tp = fp = fn = tn = 0
    for v in golds:
        if v.id not in predictions:
            raise MissingPrediction(v.id)
        pred = predictions[v.id].referral
        if v.gold_referral:
            tp += pred
            fn += not pred
        else:
            fp += pred
            tn += not pred
    return ConfusionCounts(tp, fp, fn, tn)


@dataclass(frozen=True)
class ClassMetrics:
    class_id: str
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class MacroMetrics:
    per_class: list[ClassMetrics]
    precision: float
    recall: float
    f1: float

    def to_json(self) -> dict[str, Any]:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "per_class": [asdict(c) for c in self.per_class],
        }


def macro_from_labels(predicted: Sequence[Hashable], gold: Sequence[Hashable]) -> MacroMetrics:
    """One-vs-rest per class, then unweighted means of P, R and F1."""
    if len(predicted) != len(gold):
        raise ShapeMismatch("predicted and gold label sequences differ in length")
    pairs = Counter(zip(predicted, gold))
    pred_tot = Counter(predicted)
    gold_tot = Counter(gold)
    classes = sorted(set(pred_tot) | set(gold_tot), key=str)
    per = []
    for c in classes:
        tp = pairs[(c, c)]
        counts = ConfusionCounts(tp, pred_tot[c] - tp, gold_tot[c] - tp)
        p, r, f = prf(counts)
        per.append(ClassMetrics(str(c), p, r, f, gold_tot[c]))
    n = len(per)
    if n == 0:
        return MacroMetrics([], 0.0, 0.0, 0.0)
    return MacroMetrics(
        per,
        math.fsum(c.precision for c in per) / n,
        math.fsum(c.recall for c in per) / n,
        math.fsum(c.f1 for c in per) / n,
    )


def macro_metrics(predictions: Mapping[str, Outcome], golds: Iterable[Vignette]) -> MacroMetrics:
    pred, gold = [], []
    for v in golds:
        if v.id not in predictions:
            raise MissingPrediction(v.id)
        pred.append(outcome_label(predictions[v.id]))
        gold.append(gold_label(v))
    return macro_from_labels(pred, gold)


def stratify(
    predictions: Mapping[str, Outcome], golds: Iterable[Vignette], by: str
) -> dict[str, MacroMetrics | None]:
    """Macro metrics per category or length condition; empty strata map to None (NA)."""
    if by == "category":
        strata, key = CATEGORIES, (lambda v: v.category)
    elif by == "length_condition":
        strata, key = LENGTHS, (lambda v: v.length_condition)
    else:
        raise ValueError(f"cannot stratify by {by!r}")
    groups: dict[str, list[Vignette]] = {s: [] for s in strata}
    for v in golds:
        groups[key(v)].append(v)
    return {s: (macro_metrics(predictions, vs) if vs else None) for s, vs in groups.items()}


# ---------------------------------------------------------------------------
# multi-run aggregation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricSummary:
    mean: float | None
    std: float | None
    n: int

    def render(self) -> str:
        if self.mean is None:
            return "NA"
        return f"{self.mean:.2f} ± {self.std:.2f}"


@dataclass
class AggregateReport:
    metrics: dict[str, MetricSummary]
    run_count: int

    @property
    def single_run(self) -> bool:
        return self.run_count == 1

    def render(self, name: str) -> str:
        return self.metrics[name].render()

    def to_json(self) -> dict[str, Any]:
        return {
            "run_count": self.run_count,
            "single_run": self.single_run,
            "metadata": METADATA,
            "metrics": {k: {"mean": m.mean, "std": m.std, "n": m.n, "text": m.render()} for k, m in self.metrics.items()},
        }


def aggregate_runs(runs: Sequence[Mapping[str, float | None]]) -> AggregateReport:
    if not runs:
        raise ShapeMismatch("need at least one run")
    keys = list(runs[0])
    for r in runs[1:]:
        if list(r) != keys:
            raise ShapeMismatch("runs report different metric sets")
    out = {}
    for k in keys:
        vals = [r[k] for r in runs]
        if any(v is None for v in vals):
            if not all(v is None for v in vals):
                raise ShapeMismatch(f"metric {k!r} is NA in some runs only")
            out[k] = MetricSummary(None, None, len(vals))
            continue
        arr = np.asarray(vals, dtype=float)
        std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
        out[k] = MetricSummary(float(arr.mean()), std, len(arr))
    return AggregateReport(out, len(runs))


# ---------------------------------------------------------------------------
# traversal length
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GroupStats:
    gold_steps: int
    n: int
    mean: float
    min: int
    q1: float
    median: float
    q3: float
    max: int


@dataclass
class TraversalDistribution:
    groups: dict[int, GroupStats]
    rows: list[tuple[int, str, int]]

    def to_json(self) -> dict[str, Any]:
        return {"groups": {str(k): asdict(g) for k, g in self.groups.items()}}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["gold_steps", "vignette_id", "difference"])
        w.writerows(self.rows)
        return buf.getvalue()


def traversal_distribution(pairs: Iterable[tuple[Trace, Trace]]) -> TraversalDistribution:
    """Group predicted-minus-gold step differences by gold path length."""
    rows = []
    for pred, gold in pairs:
        rows.append((gold.step_count, gold.vignette_id, traversal_difference(pred, gold)))
    rows.sort(key=lambda r: (r[0], r[1]))
    by: dict[int, list[int]] = {}
    for steps, _, d in rows:
        by.setdefault(steps, []).append(d)
    groups = {}
    for steps, ds in sorted(by.items()):
        q1, med, q3 = (float(x) for x in np.percentile(ds, [25, 50, 75]))
        groups[steps] = GroupStats(steps, len(ds), float(np.mean(ds)), min(ds), q1, med, q3, max(ds))
    return TraversalDistribution(groups, rows)


# ---------------------------------------------------------------------------
# per-run report
# ---------------------------------------------------------------------------


@dataclass
class RunReport:
    domain: str
    n_vignettes: int
    n_scored: int
    aborted_ids: list[str]
    binary: ConfusionCounts
    macro: MacroMetrics
    by_category: dict[str, MacroMetrics | None]
    by_length: dict[str, MacroMetrics | None]
    mean_words_by_length: dict[str, float | None]
    traversal: TraversalDistribution
    oracle_descriptor: dict[str, Any] = field(default_factory=dict)

    @property
    def n_aborted(self) -> int:
        return len(self.aborted_ids)

    def metric_vector(self) -> dict[str, float | None]:
        p, r, f = prf(self.binary)
        vec: dict[str, float | None] = {
            "binary.precision": p,
            "binary.recall": r,
            "binary.f1": f,
            "multiclass.precision": self.macro.precision,
            "multiclass.recall": self.macro.recall,
            "multiclass.f1": self.macro.f1,
        }
        for s, m in self.by_category.items():
            vec[f"category.{s}.f1"] = None if m is None else m.f1
        for s, m in self.by_length.items():
            for k in ("precision", "recall", "f1"):
                vec[f"length.{s}.{k}"] = None if m is None else getattr(m, k)
        vec["traversal.mean_difference"] = (
            float(np.mean([d for _, _, d in self.traversal.rows])) if self.traversal.rows else None
        )
        vec["aborted"] = float(self.n_aborted)
        return vec

    def to_json(self) -> dict[str, Any]:
        p, r, f = prf(self.binary)
        return {
            "domain": self.domain,
            "oracle_descriptor": self.oracle_descriptor,
            "n_vignettes": self.n_vignettes,
            "n_scored": self.n_scored,
            "n_aborted": self.n_aborted,
            "aborted_ids": self.aborted_ids,
            "binary": {**asdict(self.binary), "precision": p, "recall": r, "f1": f},
            "multiclass": self.macro.to_json(),
            "by_category": {k: (None if m is None else m.to_json()) for k, m in self.by_category.items()},
            "by_length": {k: (None if m is None else m.to_json()) for k, m in self.by_length.items()},
            "mean_words_by_length": self.mean_words_by_length,
            "traversal": self.traversal.to_json(),
            "metadata": METADATA,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def build_run_report(
    tree: GuidanceTree,
    vignettes: Sequence[Vignette],
    traces: Mapping[str, Trace],
    gold_traces: Mapping[str, Trace] | None = None,
) -> RunReport:
    """Score one run.  ``traces`` maps vignette id to its (possibly aborted) trace.

    ``gold_traces`` may be passed to reuse perfect-oracle traces across runs.
    """
    aborted = sorted(v.id for v in vignettes if traces[v.id].aborted)
    scored = [v for v in vignettes if not traces[v.id].aborted]
    preds = {v.id: traces[v.id].outcome for v in scored}
    pairs = []
    for v in scored:
        t = traces[v.id]
        if t.vignette_id != v.id:
            raise MismatchedVignette(f"trace {t.vignette_id} filed under {v.id}")
        gold = gold_traces[v.id] if gold_traces is not None else gold_trace(tree, v.features, v.id)
        pairs.append((t, gold))
    words: dict[str, list[int]] = {s: [] for s in LENGTHS}
    for v in vignettes:
        words[v.length_condition].append(v.word_count)
    descriptors = {json.dumps(traces[v.id].oracle_descriptor, sort_keys=True) for v in vignettes}
    descriptor = json.loads(descriptors.pop()) if len(descriptors) == 1 else {"backend": "mixed"}
    return RunReport(
        domain=tree.domain,
        n_vignettes=len(vignettes),
        n_scored=len(scored),
        aborted_ids=aborted,
        binary=binary_confusion(preds, scored),
        macro=macro_metrics(preds, scored),
        by_category=stratify(preds, scored, "category"),
        by_length=stratify(preds, scored, "length_condition"),
        mean_words_by_length={s: (round(sum(w) / len(w), 1) if w else None) for s, w in words.items()},
        traversal=traversal_distribution(pairs),
        oracle_descriptor=descriptor,
    )


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

_CAT_LABELS = {
    "single": "Single-criteria",
    "contrastive": "Contrastive-criteria",
    "multi": "Multi-criteria",
    "exclusion": "Exclusion-criteria",
}


def render_aggregate_markdown(domain: str, agg: AggregateReport, mean_words: Mapping[str, float | None] | None = None) -> str:
    m = agg.metrics
    lines = [
        f"## {domain} ({agg.run_count} run{'s' if agg.run_count != 1 else ''})",
        "",
        "| Task | Precision | Recall | F1-Score |",
        "|---|---|---|---|",
        f"| Binary | {m['binary.precision'].render()} | {m['binary.recall'].render()} | {m['binary.f1'].render()} |",
        f"| Multi-class | {m['multiclass.precision'].render()} | {m['multiclass.recall'].render()} | {m['multiclass.f1'].render()} |",
        "",
        "| Category | Macro F1 |",
        "|---|---|",
    ]
    lines += [f"| {_CAT_LABELS[c]} | {m[f'category.{c}.f1'].render()} |" for c in CATEGORIES]
    lines += ["", "| Condition | Precision | Recall | F1-Score | Mean Length (Words) |", "|---|---|---|---|---|"]
    for s in LENGTHS:
        w = (mean_words or {}).get(s)
        lines.append(
            f"| {s.capitalize()} | {m[f'length.{s}.precision'].render()} | {m[f'length.{s}.recall'].render()} "
            f"| {m[f'length.{s}.f1'].render()} | {'NA' if w is None else f'{w:.0f}'} |"
        )
    lines += [
        "",
        f"Aborted traversals per run: {m['aborted'].render()}",
        "",
        "Notes: " + "; ".join(METADATA.values()) + ".",
    ]
    return "\n".join(lines) + "\n"


def render_aggregate_csv(agg: AggregateReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "mean", "std", "runs", "text"])
    for k, s in agg.metrics.items():
        w.writerow([k, "" if s.mean is None else repr(s.mean), "" if s.std is None else repr(s.std), s.n, s.render()])
    return buf.getvalue()
