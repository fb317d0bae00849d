"""Command-line entry point.

Exit codes: 0 success, 1 validation failure, 2 I/O or configuration error,
3 one or more traversals aborted.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from . import builder
from .corpus import (
    CorpusError,
    GenerationPlan,
    InfeasibleCategory,
    emit_generation_prompt,
    load_corpus,
    load_templates,
    corpus_stats,
    generate_specs,
    realize,
    render_stats_csv,
    render_stats_markdown,
    write_corpus,
)
from .engine import read_traces, render_trace
from .oracle import ChatClient, InteractiveOracle, NoiseConfig, OracleConfig, RemoteConfig, set_rate_limit
from .runner import ReplayFailure, evaluate_stored, run_experiment
from .tree import TreeParseError, load_tree, validate_tree

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_ABORTED = 0, 1, 2, 3

log = logging.getLogger("guidetree")


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    tree: Path | None
    corpus: Path
    oracle: OracleConfig = field(default_factory=OracleConfig)
    seed: int = 0
    runs: int = 5
    out: Path = Path("runs")
    jobs: int = 1
    vignette: str | None = None

    def __post_init__(self):
        if self.runs < 1:
            raise ConfigError("--runs must be >= 1")
        if self.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        for p in (self.tree, self.corpus):
            if p is not None and not p.is_file():
                raise ConfigError(f"file not found: {p}")
        if self.oracle.backend == "interactive" and self.vignette is None:
            raise ConfigError("the interactive oracle needs --vignette (single-vignette mode)")


def _read_json_file(path: str) -> dict[str, Any]:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    return data


def _remote_from_args(args, base: RemoteConfig | None = None) -> RemoteConfig:
    d = dict(vars(base)) if base is not None else {}
    for key in ("endpoint", "model", "temperature"):
        v = getattr(args, key, None)
        if v is not None:
            d[key] = v
    return RemoteConfig(**d)


def run_config_from_args(args) -> RunConfig:
    conf = _read_json_file(args.config) if args.config else {}
    try:
        oracle = OracleConfig.from_json(conf.get("oracle", {}))
        backend = args.oracle or oracle.backend
        noise = oracle.noise
        if args.p_no_to_yes is not None or args.p_yes_to_no is not None:
            noise = NoiseConfig(
                args.p_no_to_yes if args.p_no_to_yes is not None else noise.p_no_to_yes,
                args.p_yes_to_no if args.p_yes_to_no is not None else noise.p_yes_to_no,
            )
        oracle = OracleConfig(
            backend=backend,
            absent_feature_policy=args.absent or oracle.absent_feature_policy,
            noise=noise,
            remote=_remote_from_args(args, oracle.remote),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad oracle configuration: {exc}") from exc

    def pick(name, default):
        v = getattr(args, name)
        return v if v is not None else conf.get(name, default)

    tree = pick("tree", None)
    return RunConfig(
        tree=Path(tree) if tree else None,
        corpus=Path(pick("corpus", "")),
        oracle=oracle,
        seed=int(pick("seed", 0)),
        runs=int(pick("runs", 5)),
        out=Path(pick("out", "runs")),
        jobs=int(pick("jobs", 1)),
        vignette=pick("vignette", None),
    )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_validate(args) -> int:
    try:
        tree = load_tree(args.tree)
    except OSError as exc:
        print(f"error: cannot read {args.tree}: {exc}", file=sys.stderr)
        return EXIT_IO
    except TreeParseError as exc:
        if args.json:
            print(json.dumps({"ok": False, "parse_errors": [{"path": i.path, "message": i.message} for i in exc.issues]}, indent=2))
        else:
            print("PARSE ERROR")
            for i in exc.issues:
                print(f"  {i}")
        return EXIT_INVALID
    report = validate_tree(tree)
    print(json.dumps(report.to_json(), indent=2, sort_keys=True) if args.json else report.render())
    return EXIT_OK if report.ok else EXIT_INVALID


def cmd_run(args) -> int:
    cfg = run_config_from_args(args)
    if cfg.tree is not None:
        rep = validate_tree(load_tree(cfg.tree))
        if not rep.ok:
            print(rep.render(), file=sys.stderr)
            return EXIT_INVALID
    manifest = load_corpus(cfg.corpus, load_tree(cfg.tree) if cfg.tree else None)
    if not validate_tree(manifest.tree).ok:
        print(validate_tree(manifest.tree).render(), file=sys.stderr)
        return EXIT_INVALID
    vignettes = None
    factory = None
    if cfg.vignette is not None:
        by_id = manifest.by_id()
        if cfg.vignette not in by_id:
            raise ConfigError(f"no vignette {cfg.vignette!r} in {cfg.corpus}")
        vignettes = [by_id[cfg.vignette]]
    if cfg.oracle.backend == "interactive":
        if args.runs is None:
            cfg.runs = 1
        v = vignettes[0]
        print(f"--- vignette {v.id} ---\n{v.text}\n", file=sys.stderr)

        def factory(_v):
            return InteractiveOracle(out=sys.stderr)
    client = None
    if cfg.oracle.backend == "remote":
        set_rate_limit(cfg.oracle.remote.requests_per_second)
        client = ChatClient(cfg.oracle.remote)
    result = run_experiment(
        manifest, cfg.oracle,
        base_seed=cfg.seed, runs=cfg.runs, jobs=cfg.jobs, out_dir=cfg.out,
        client=client, oracle_factory=factory, vignettes=vignettes,
    )
    if args.json:
        print(json.dumps(result.aggregate.to_json(), indent=2, sort_keys=True))
    else:
        print((cfg.out / "aggregate.md").read_text(encoding="utf-8"), end="")
        if cfg.oracle.backend == "interactive":
            print(render_trace(read_traces(cfg.out / f"traces_run{cfg.runs}.jsonl")[0]))
    if result.aborted:
        print(f"{result.aborted} traversal(s) aborted; see traces for the errors", file=sys.stderr)
        return EXIT_ABORTED
    return EXIT_OK


def cmd_eval(args) -> int:
    manifest = load_corpus(args.corpus, load_tree(args.tree) if args.tree else None)
    out = Path(args.out) if args.out else Path(args.traces)
    result = evaluate_stored(manifest, args.traces, out)
    if args.json:
        print(json.dumps(result.aggregate.to_json(), indent=2, sort_keys=True))
    else:
        print((out / "aggregate.md").read_text(encoding="utf-8"), end="")
    return EXIT_ABORTED if result.aborted else EXIT_OK


def cmd_stats(args) -> int:
    stats = [corpus_stats(load_corpus(p)) for p in args.corpus]
    if args.json:
        print(json.dumps([vars(s) for s in stats], indent=2, sort_keys=True))
    elif args.csv:
        print(render_stats_csv(stats), end="")
    else:
        print(render_stats_markdown(stats), end="")
    return EXIT_OK


def cmd_trace(args) -> int:
    traces = [t for t in read_traces(args.traces) if t.vignette_id == args.vignette]
    if not traces:
        print(f"error: no trace for vignette {args.vignette!r} in {args.traces}", file=sys.stderr)
        return EXIT_IO
    for t in traces:
        print(json.dumps(t.to_json(), indent=2, sort_keys=True) if args.json else render_trace(t))
    return EXIT_OK


def cmd_gen_corpus(args) -> int:
    tree = load_tree(args.tree)
    rep = validate_tree(tree)
    if not rep.ok:
        print(rep.render(), file=sys.stderr)
        return EXIT_INVALID
    plan_doc = _read_json_file(args.plan) if args.plan else {"counts": {}}
    for cat in ("single", "contrastive", "multi", "exclusion"):
        v = getattr(args, cat)
        if v is not None:
            plan_doc.setdefault("counts", {})[cat] = v
    if args.seed is not None:
        plan_doc["seed"] = args.seed
    if args.lengths:
        plan_doc["lengths"] = args.lengths.split(",")
    try:
        plan = GenerationPlan.from_json(plan_doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad generation plan: {exc}") from exc
    try:
        specs = generate_specs(tree, plan)
    except InfeasibleCategory as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    templates = load_templates(args.templates)
    vignettes = [realize(s, templates, plan.seed) for s in specs]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tree_ref = os.path.relpath(Path(args.tree).resolve(), out.parent.resolve())
    write_corpus(out, tree_ref, tree, vignettes)
    if args.prompts:
        pdir = Path(args.prompts)
        pdir.mkdir(parents=True, exist_ok=True)
        for v in vignettes:
            (pdir / f"{v.id}.txt").write_text(emit_generation_prompt(v, templates), encoding="utf-8")
    print(render_stats_markdown([corpus_stats(load_corpus(out))]), end="")
    return EXIT_OK


def cmd_build_tree(args) -> int:
    text = Path(args.guideline).read_text(encoding="utf-8")
    if args.offline:
        rdir = Path(args.offline)

        def respond(i: int, prompt: str) -> str:
            path = rdir / f"reply_{i:02d}.txt"
            if not path.is_file():
                raise ConfigError(f"offline mode: missing recorded reply {path}")
            return path.read_text(encoding="utf-8")
    else:
        client = ChatClient(_remote_from_args(args))

        def respond(i: int, prompt: str) -> str:
            return client.complete([{"role": "user", "content": prompt}])[0]

    try:
        result = builder.build_tree(text, args.budget, respond, domain=args.domain, out_dir=args.out)
    except builder.ParagraphExceedsBudget as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    for f in result.failures:
        print(f"error: {f}", file=sys.stderr)
    if result.tree is None:
        return EXIT_INVALID
    print(f"merged {len(result.segments)} segment(s) into {Path(args.out) / 'tree.json'}")
    print(result.report.render())
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_remote_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--endpoint", help="chat-completions URL for the remote backend")
    p.add_argument("--model", help="model name sent to the endpoint")
    p.add_argument("--temperature", type=float, help="sampling temperature (default 0.2)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="guidetree", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a tree document")
    p.add_argument("tree")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", help="traverse a corpus with an oracle, write traces and reports")
    p.add_argument("--tree", help="tree document (default: the one named in the corpus header)")
    p.add_argument("--corpus")
    p.add_argument("--oracle", choices=OracleConfig.BACKENDS)
    p.add_argument("--seed", type=int)
    p.add_argument("--runs", type=int, help="number of runs (default 5)")
    p.add_argument("--jobs", type=int, help="concurrent traversals (default 1)")
    p.add_argument("--out", help="output directory (default ./runs)")
    p.add_argument("--vignette", help="run a single vignette (required for --oracle interactive)")
    p.add_argument("--p-no-to-yes", type=float, dest="p_no_to_yes")
    p.add_argument("--p-yes-to-no", type=float, dest="p_yes_to_no")
    p.add_argument("--absent", choices=("no", "error"), help="scripted answer for features the vignette does not list")
    p.add_argument("--config", help="JSON file with run settings; flags override it")
    p.add_argument("--json", action="store_true")
    _add_remote_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="rebuild reports from stored traces (no oracle calls)")
    p.add_argument("--corpus", required=True)
    p.add_argument("--tree")
    p.add_argument("--traces", required=True, help="directory holding traces_run*.jsonl")
    p.add_argument("--out", help="where to write reports (default: the traces directory)")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stats", help="corpus statistics table")
    p.add_argument("corpus", nargs="+")
    p.add_argument("--csv", action="store_true")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("trace", help="print one vignette's audit trail")
    p.add_argument("traces", help="a traces_run*.jsonl file")
    p.add_argument("--vignette", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("gen-corpus", help="generate a synthetic vignette corpus from a tree")
    p.add_argument("--tree", required=True)
    p.add_argument("--templates", required=True)
    p.add_argument("--plan", help="JSON generation plan")
    for cat in ("single", "contrastive", "multi", "exclusion"):
        p.add_argument(f"--{cat}", type=int, help=f"number of {cat} vignettes")
    p.add_argument("--lengths", help="comma-separated length conditions, assigned cyclically")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="corpus .jsonl path")
    p.add_argument("--prompts", help="also write one generation prompt per vignette here")
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("build-tree", help="guideline text -> prompts -> replies -> merged tree")
    p.add_argument("guideline")
    p.add_argument("--budget", type=int, default=1500, help="token budget per segment")
    p.add_argument("--out", required=True)
    p.add_argument("--domain")
    p.add_argument("--offline", metavar="DIR", help="read recorded replies reply_NN.txt from DIR")
    _add_remote_flags(p)
    p.set_defaults(func=cmd_build_tree)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (OSError, TreeParseError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except CorpusError as exc:
        print(f"error: corpus rejected: {exc}", file=sys.stderr)
        return EXIT_IO
    except ReplayFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
