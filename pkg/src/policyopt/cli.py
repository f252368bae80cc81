"""Command-line entry point: ``policyopt <subcommand> ...``.

Subcommands
    catalog   write the built-in demo catalog as JSON
    generate  write a corpus of random queries
    optimize  optimize a corpus with one method and write a run directory
    compare   put several run reports side by side
    classify  run the pairwise time-classification harness

Every option may also come from a JSON config file (``--config``); flags
given on the command line win.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Optional

from . import figures
from .classifier import ClassifierSession, CostModelClient, accuracy_harness, sample_pairs
from .cost import EQUALITY_TOLERANCE, Catalog, CostParams, plan_cost
from .gcd import run_aggregated, run_gcd
from .llm import ClientConfig, HttpChatClient
from .plan import PlanNode, serialize_plan
from .proposer import ExhaustiveProposer, GreedyProposer, LLMProposer, template
from .workload import (
    GeneratorLimits,
    OptimizationReport,
    SimProfile,
    demo_catalog,
    dump_corpus,
    evaluate_method,
    generate_corpus,
    load_corpus,
)

log = logging.getLogger("policyopt")

METHODS = ("gcd", "gcd-lite", "gcd-agg", "gcd-lite-agg", "greedy", "exhaustive")

DEFAULTS = {
    "catalog": None,
    "params": None,
    "corpus": None,
    "out": None,
    "method": "gcd",
    "proposer": "rule",
    "k": 5,
    "tolerance": 3,
    "iteration_cap": 25,
    "seed": 0,
    "profile": "matched",
    "profile_seed": 0,
    "llm_config": None,
    "jobs": 1,
    "n": 50,
    "placement": "stacked",
    "offline": False,
}


class ConfigError(Exception):
    pass


def _resolve(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            from_file = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        unknown = set(from_file) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg.update(from_file)
    for key, value in vars(args).items():
        if key in DEFAULTS and value is not None:
            cfg[key] = value
    return cfg


def _catalog(cfg: dict) -> Catalog:
    if cfg["catalog"] is None:
        raise ConfigError("--catalog is required")
    try:
        return Catalog.load(cfg["catalog"])
    except FileNotFoundError:
        raise ConfigError(f"catalog file not found: {cfg['catalog']}") from None
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"bad catalog {cfg['catalog']}: {exc}") from None


def _params(cfg: dict) -> CostParams:
    if cfg["params"] is None:
        return CostParams()
    try:
        return CostParams.load(cfg["params"])
    except (OSError, ValueError) as exc:
        raise ConfigError(f"bad cost parameters {cfg['params']}: {exc}") from None


def _corpus(cfg: dict) -> list[PlanNode]:
    if cfg["corpus"] is None:
        raise ConfigError("--corpus is required")
    try:
        return load_corpus(Path(cfg["corpus"]).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read corpus: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"corpus does not parse: {exc}") from None


def _profile(cfg: dict, params: CostParams) -> SimProfile:
    if cfg["profile"] == "matched":
        return SimProfile.matched(params)
    if cfg["profile"] == "unmatched":
        return SimProfile.unmatched(int(cfg["profile_seed"]), params)
    raise ConfigError(f"profile must be 'matched' or 'unmatched', not {cfg['profile']!r}")


def _llm_client(cfg: dict) -> HttpChatClient:
    if not cfg["llm_config"]:
        raise ConfigError("the llm proposer needs --llm-config")
    try:
        doc = json.loads(Path(cfg["llm_config"]).read_text())
        return HttpChatClient(ClientConfig.from_json(doc))
    except (OSError, ValueError, TypeError) as exc:
        raise ConfigError(f"bad llm config: {exc}") from None


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# ---------------------------------------------------------------------------


def cmd_catalog(args) -> int:
    text = json.dumps(demo_catalog().to_json(), indent=1)
    if args.out:
        _write(Path(args.out), text + "\n")
    else:
        print(text)
    return 0


def cmd_generate(args) -> int:
    cfg = _resolve(args)
    catalog = _catalog(cfg)
    if cfg["out"] is None:
        raise ConfigError("--out is required")
    n = int(cfg["n"])
    if n < 0:
        raise ConfigError("--n must be non-negative")
    limits = GeneratorLimits(placement=cfg["placement"])
    plans = generate_corpus(n, int(cfg["seed"]), catalog, limits, _params(cfg)) if n else []
    _write(Path(cfg["out"]), dump_corpus(plans) + "\n")
    print(f"wrote {len(plans)} queries to {cfg['out']}")
    return 0


def build_optimizer(cfg: dict, catalog: Catalog, params: CostParams):
    """An ``optimize_fn`` for :func:`evaluate_method` plus the trace store it fills."""
    method = cfg["method"]
    if method not in METHODS:
        raise ConfigError(f"method must be one of {', '.join(METHODS)}")
    k = int(cfg["k"])
    if k < 1:
        raise ConfigError("k must be at least 1")
    if cfg["proposer"] not in ("rule", "llm"):
        raise ConfigError("proposer must be 'rule' or 'llm'")
    seed = int(cfg["seed"])
    gcd_kwargs = {"tolerance": int(cfg["tolerance"]), "iteration_cap": int(cfg["iteration_cap"]),
                  "lite": "lite" in method}
    traces: dict[str, list] = {}

    if method == "exhaustive":
        oracle = ExhaustiveProposer(catalog, params)
        return (lambda plan: oracle.minimum(plan)[0]), traces

    if method == "greedy":
        stepper = GreedyProposer(catalog, params)

        def descend(plan):
            cost = plan_cost(plan, catalog, params)
            while True:
                step = stepper.best_step(plan)
                if step is None or step[0] >= cost - EQUALITY_TOLERANCE:
                    return plan
                cost, plan = step[0], step[1].result
        return descend, traces

    proposer = (LLMProposer(_llm_client(cfg)) if cfg["proposer"] == "llm"
                else GreedyProposer(catalog, params, seed=seed))

    def optimize(plan):
        key = serialize_plan(plan)
        if method.endswith("-agg"):
            best, run_traces = run_aggregated(plan, proposer, k, catalog, params, seed=seed, **gcd_kwargs)
            traces[key] = [t for t in run_traces if t is not None]
            return best
        best, trace = run_gcd(plan, proposer, catalog, params, **gcd_kwargs)
        traces[key] = [trace]
        return best

    return optimize, traces


def cmd_optimize(args) -> int:
    cfg = _resolve(args)
    catalog = _catalog(cfg)
    params = _params(cfg)
    queries = _corpus(cfg)
    if not queries:
        raise ConfigError("the corpus is empty")
    profile = _profile(cfg, params)
    if cfg["out"] is None:
        raise ConfigError("--out is required")
    out = Path(cfg["out"])
    optimize, traces = build_optimizer(cfg, catalog, params)
    label = cfg["method"] if cfg["method"] in ("greedy", "exhaustive") else f"{cfg['method']}+{cfg['proposer']}"
    report = evaluate_method(queries, optimize, catalog, params, profile, method=label, jobs=int(cfg["jobs"]))
    report.config = {k: cfg[k] for k in sorted(cfg) if k not in ("n", "placement", "offline")}

    out.mkdir(parents=True, exist_ok=True)
    _write(out / "report.json", json.dumps(report.to_json(), indent=1) + "\n")
    _write(out / "report.csv", report.records_csv())
    _write(out / "summary.csv", summary_csv([report]))
    trace_costs = []
    for record in report.records:
        for j, trace in enumerate(traces.get(record.initial_plan, [])):
            _write(out / "traces" / f"query_{record.query_id:03d}_run_{j}.jsonl", trace.to_jsonl())
            trace_costs.append([trace.initial_cost] + [r.cost for r in trace.records if r.accepted])
    fig_dir = out / "figures"
    fig_dir.mkdir(exist_ok=True)
    made = [figures.time_scatter(report, fig_dir / "time_scatter.png"),
            figures.improvement_hist(report, fig_dir / "improvement_hist.png")]
    if trace_costs:
        made.append(figures.cost_trace(trace_costs, fig_dir / "cost_trace.png", label))
    manifest = {
        "command": "optimize",
        "config": report.config,
        "prompt_version": template("VERSION").strip(),
        "queries": len(queries),
        "files": sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file()),
    }
    _write(out / "manifest.json", json.dumps(manifest, indent=1) + "\n")
    s = report.summary
    print(f"{label}: queries={s.queries} PoI={s.poi:.4f} ToI={s.toi:.2f} VR={s.vr:.3f} -> {out}")
    return 0


SUMMARY_FIELDS = ("method", "queries", "avg_time_init", "avg_time_opt", "poi", "toi", "vr")


def summary_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(SUMMARY_FIELDS)
    for r in reports:
        row = asdict(r.summary)
        writer.writerow([row[f] for f in SUMMARY_FIELDS])
    return buf.getvalue()


def check_same_queries(reports, names) -> None:
    base = {r.query_id: r.initial_plan for r in reports[0].records}
    for report, name in zip(reports[1:], names[1:]):
        other = {r.query_id: r.initial_plan for r in report.records}
        missing = sorted(set(base) ^ set(other))
        if missing:
            raise ConfigError(f"{name} and {names[0]} cover different queries: ids {missing[:10]}")
        changed = sorted(q for q in base if base[q] != other[q])
        if changed:
            raise ConfigError(f"{name} and {names[0]} differ on initial plans of queries {changed[:10]}")


def render_table(reports) -> str:
    head = f"{'method':<22}{'avg init':>14}{'avg opt':>14}{'PoI':>9}{'ToI':>14}{'VR':>7}"
    lines = [head, "-" * len(head)]
    for r in reports:
        s = r.summary
        lines.append(f"{s.method:<22}{s.avg_time_init:>14.2f}{s.avg_time_opt:>14.2f}"
                     f"{100 * s.poi:>8.2f}%{s.toi:>14.2f}{s.vr:>7.3f}")
    return "\n".join(lines)


def cmd_compare(args) -> int:
    reports = []
    for path in args.reports:
        try:
            reports.append(OptimizationReport.from_json(json.loads(Path(path).read_text())))
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"cannot read report {path}: {exc}") from None
    check_same_queries(reports, args.reports)
    print(render_table(reports))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write(out / "compare.csv", summary_csv(reports))
        figures.method_bars(reports, out / "methods.png")
    return 0


def cmd_classify(args) -> int:
    cfg = _resolve(args)
    catalog = _catalog(cfg)
    params = _params(cfg)
    queries = _corpus(cfg)
    profile = _profile(cfg, params)
    client = CostModelClient(catalog, params) if cfg["offline"] else _llm_client(cfg)
    pairs = sample_pairs(queries, catalog, params, profile, int(cfg["seed"]))
    session = ClassifierSession.start(catalog)
    result = accuracy_harness(pairs, session, client, catalog, params)
    print(f"pairs: train={result.n_train} test={result.n_test} "
          f"llm accuracy={result.llm_accuracy:.3f} cost-model accuracy={result.cost_model_accuracy:.3f}")
    if cfg["out"]:
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        session.save(out / "session.json")
        _write(out / "classify.json", json.dumps(result.to_json(), indent=1) + "\n")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="policyopt", description="Policy-guided plan optimization.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("catalog", help="write the demo catalog")
    p.add_argument("--out")
    p.set_defaults(func=cmd_catalog)

    def common(p):
        p.add_argument("--config", help="JSON file with default option values")
        p.add_argument("--catalog")
        p.add_argument("--params", help="cost parameter JSON")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")

    p = sub.add_parser("generate", help="generate a query corpus")
    common(p)
    p.add_argument("--n", type=int)
    p.add_argument("--placement", choices=("stacked", "scattered"))
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("optimize", help="optimize a corpus and write a report")
    common(p)
    p.add_argument("--corpus")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--proposer", choices=("rule", "llm"))
    p.add_argument("--k", type=int)
    p.add_argument("--tolerance", type=int)
    p.add_argument("--iteration-cap", dest="iteration_cap", type=int)
    p.add_argument("--profile", choices=("matched", "unmatched"))
    p.add_argument("--profile-seed", dest="profile_seed", type=int)
    p.add_argument("--llm-config", dest="llm_config")
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("compare", help="compare run reports")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("classify", help="pairwise time-classification harness")
    common(p)
    p.add_argument("--corpus")
    p.add_argument("--profile", choices=("matched", "unmatched"))
    p.add_argument("--profile-seed", dest="profile_seed", type=int)
    p.add_argument("--llm-config", dest="llm_config")
    p.add_argument("--offline", action="store_true", default=None,
                   help="answer with the cost model instead of an endpoint")
    p.set_defaults(func=cmd_classify)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"policyopt: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
