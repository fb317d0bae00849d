"""Batch traversal of a corpus and the on-disk layout of run outputs."""

from __future__ import annotations

import json
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .corpus import CorpusManifest, Vignette
from .engine import Trace, TraversalAborted, gold_trace, read_traces, replay, traverse, write_traces
from .evaluation import (
    AggregateReport,
    RunReport,
    aggregate_runs,
    build_run_report,
    render_aggregate_csv,
    render_aggregate_markdown,
)
from .oracle import PROMPT_VERSION, ChatClient, Oracle, OracleConfig, _descriptor, build_oracle, derive_seed


def run_descriptor(cfg: OracleConfig, run_seed: int) -> dict[str, Any]:
    """Descriptor shared by every trace of one run; per-vignette seeds derive from it."""
    conf = cfg.to_json()
    if cfg.backend != "remote":
        conf.pop("remote")
    if cfg.backend != "noisy":
        conf.pop("noise")
    conf["run_seed"] = run_seed
    return _descriptor(cfg.backend, conf, PROMPT_VERSION if cfg.backend == "remote" else None)


def run_once(
    manifest: CorpusManifest,
    cfg: OracleConfig,
    run_seed: int,
    *,
    jobs: int = 1,
    client: ChatClient | None = None,
    oracle_factory: Callable[[Vignette], Oracle] | None = None,
    vignettes: Sequence[Vignette] | None = None,
) -> list[Trace]:
    """Traverse every vignette once; aborted traversals come back as aborted traces."""
    tree = manifest.tree
    desc = run_descriptor(cfg, run_seed)
    todo = list(manifest.vignettes if vignettes is None else vignettes)
    if cfg.backend == "remote" and client is None and oracle_factory is None:
        client = ChatClient(cfg.remote)

    def one(v: Vignette) -> Trace:
        if oracle_factory is not None:
            oracle = oracle_factory(v)
        else:
            oracle = build_oracle(cfg, features=v.features, text=v.text, seed=derive_seed(run_seed, v.id), client=client)
        try:
            _, trace = traverse(tree, oracle, vignette_id=v.id, descriptor=desc)
        except TraversalAborted as exc:
            trace = exc.trace
        return trace

    if jobs <= 1:
        return [one(v) for v in todo]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(one, todo))


def _write_text(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8", newline="\n")


def write_run_outputs(out: Path, r: int, traces: Sequence[Trace] | None, report: RunReport) -> None:
    if traces is not None:
        write_traces(out / f"traces_run{r}.jsonl", traces)
    _write_text(out / f"report_run{r}.json", report.dumps())
    single = aggregate_runs([report.metric_vector()])
    _write_text(out / f"report_run{r}.md", render_aggregate_markdown(report.domain, single, report.mean_words_by_length))
    _write_text(out / f"traversal_run{r}.csv", report.traversal.to_csv())


def write_aggregate(out: Path, domain: str, reports: Sequence[RunReport]) -> AggregateReport:
    agg = aggregate_runs([r.metric_vector() for r in reports])
    _write_text(out / "aggregate.json", json.dumps(agg.to_json(), sort_keys=True, indent=2, ensure_ascii=False) + "\n")
    _write_text(out / "aggregate.csv", render_aggregate_csv(agg))
    _write_text(out / "aggregate.md", render_aggregate_markdown(domain, agg, reports[0].mean_words_by_length))
    return agg


@dataclass
class ExperimentResult:
    reports: list[RunReport]
    aggregate: AggregateReport

    @property
    def aborted(self) -> int:
        return sum(r.n_aborted for r in self.reports)


def run_experiment(
    manifest: CorpusManifest,
    cfg: OracleConfig,
    *,
    base_seed: int = 0,
    runs: int = 5,
    jobs: int = 1,
    out_dir: str | Path | None = None,
    client: ChatClient | None = None,
    oracle_factory: Callable[[Vignette], Oracle] | None = None,
    vignettes: Sequence[Vignette] | None = None,
) -> ExperimentResult:
    """Runs r = 1..runs with seed base_seed + r, scoring and optionally writing each."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    scored = list(manifest.vignettes if vignettes is None else vignettes)
    golds = {v.id: gold_trace(manifest.tree, v.features, v.id) for v in scored}
    reports = []
    for r in range(1, runs + 1):
        traces = run_once(
            manifest, cfg, base_seed + r, jobs=jobs, client=client, oracle_factory=oracle_factory, vignettes=scored
        )
        report = build_run_report(manifest.tree, scored, {t.vignette_id: t for t in traces}, golds)
        reports.append(report)
        if out is not None:
            write_run_outputs(out, r, traces, report)
    if out is not None:
        agg = write_aggregate(out, manifest.domain, reports)
    else:
        agg = aggregate_runs([r.metric_vector() for r in reports])
    return ExperimentResult(reports, agg)


class ReplayFailure(ValueError):
    pass


def replay_traces(manifest: CorpusManifest, traces: Sequence[Trace]) -> dict[str, Trace]:
    """Re-derive each completed trace from its recorded answers alone and check it matches."""
    out = {}
    for t in traces:
        if t.aborted:
            out[t.vignette_id] = t
            continue
        _, again = replay(manifest.tree, t)
        if again.to_jsonl() != t.to_jsonl():
            raise ReplayFailure(f"trace {t.vignette_id} does not replay to the stored record")
        out[t.vignette_id] = again
    return out


def evaluate_stored(manifest: CorpusManifest, trace_dir: str | Path, out_dir: str | Path | None = None) -> ExperimentResult:
    """Rebuild run reports from traces_run*.jsonl without any oracle calls."""
    src = Path(trace_dir)
    files = sorted(src.glob("traces_run*.jsonl"), key=lambda p: int(p.stem.removeprefix("traces_run")))
    if not files:
        raise FileNotFoundError(f"no traces_run*.jsonl in {src}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    by_id = manifest.by_id()
    reports = []
    for f in files:
        r = int(f.stem.removeprefix("traces_run"))
        traces = replay_traces(manifest, read_traces(f))
        unknown = set(traces) - set(by_id)
        if unknown:
            raise ReplayFailure(f"{f.name}: traces for unknown vignettes {sorted(unknown)[:3]}")
        scored = [v for v in manifest.vignettes if v.id in traces]
        report = build_run_report(manifest.tree, scored, traces)
        reports.append(report)
        if out is not None:
            write_run_outputs(out, r, None, report)
    if out is not None:
        agg = write_aggregate(out, manifest.domain, reports)
    else:
        agg = aggregate_runs([r.metric_vector() for r in reports])
    return ExperimentResult(reports, agg)
