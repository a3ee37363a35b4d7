"""Command-line front end: one JSON experiment config, several subcommands.

    rlhfplan search       CONFIG [--out DIR]
    rlhfplan simulate     CONFIG PLAN [--trace PATH] [--mode verbatim|corrected]
    rlhfplan enumerate    CONFIG [--list CALL]
    rlhfplan brute-force  CONFIG [--limit N] [--out PATH]
    rlhfplan realloc-plan CONFIG --role ROLE --src MESH:DP,TP,PP --dst MESH:DP,TP,PP
    rlhfplan gen-profile  CONFIG --role ROLE --out PATH [--max-tokens N] [--contexts C ...]
    rlhfplan validate     CONFIG [--plan PLAN]

Relative paths inside a config are resolved against the config's directory.
Exit codes: 0 success, 1 runtime failure (e.g. infeasible space), 2 invalid
input. Diagnostics name the offending config path, e.g. ``cluster.gpus_per_node``.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

from .cluster import ClusterSpec, format_mesh, parse_mesh
from .cost_model import AnalyticProfile, CostConfig, CostModel, ProfileTable, generate_profile_table
from .model_arith import LLAMA3_PRESETS, ModelSpec, preset
from .realloc import plan_param_realloc
from .search import (SearchConfig, SearchError, brute_force, default_space, history_csv, mh_search,
                     PlanEvaluator)
from .simulator import SIM_MODES, time_cost
from .strategy import (Assignment, ExecutionPlan, ParallelStrategy, PruneConfig, log10_space_size,
                       validate_plan)
from .workflow import WORKFLOWS, DataflowGraph, WorkloadSpec, build_workflow, validate

CONFIG_SCHEMA_VERSION = 1
EXIT_OK, EXIT_FAIL, EXIT_INVALID = 0, 1, 2

_TOP_KEYS = {"schema_version", "cluster", "models", "workflow", "workload", "iterations",
             "search", "cost", "profile_tables", "outputs"}
_SEARCH_KEYS = {"beta", "alpha", "budget_proposals", "budget_seconds", "seed", "chains",
                "sim_mode", "max_options_per_call"}


class ConfigError(ValueError):
    """Invalid experiment configuration; ``problems`` holds (path, message) pairs."""

    def __init__(self, problems: Sequence[tuple]):
        self.problems = list(problems)
        super().__init__("; ".join(f"{p}: {m}" for p, m in self.problems))


@dataclass
class ExperimentConfig:
    cluster: ClusterSpec
    models: Dict[str, ModelSpec]
    graph: DataflowGraph
    workflow: str
    workload: WorkloadSpec
    iterations: int
    search: SearchConfig
    cost: CostConfig
    profile_tables: Dict[str, Path] = field(default_factory=dict)
    output_dir: Path = Path("out")

    def cost_model(self) -> CostModel:
        profiles = {role: ProfileTable.from_json(path.read_text()) for role, path in self.profile_tables.items()}
        return CostModel(self.cluster, self.models, profiles, self.cost)


def _dataclass_from(cls, data: Any, path: str, problems: List[tuple], **extra):
    if not isinstance(data, Mapping):
        problems.append((path, f"expected an object, got {type(data).__name__}"))
        return None
    known = {f.name for f in fields(cls)}
    for k in sorted(set(data) - known):
        problems.append((f"{path}.{k}", "unknown field"))
    try:
        return cls(**{k: v for k, v in data.items() if k in known}, **extra)
    except TypeError as exc:
        problems.append((path, str(exc)))
    except ValueError as exc:
        msg = str(exc)
        # errors of the form "name must ..." point at a single field
        head = msg.split()[0] if msg else ""
        head = head.split(".")[-1]
        problems.append((f"{path}.{head}" if head in known else path, msg))
    return None


def _model_from(data: Any, path: str, problems: List[tuple]) -> Optional[ModelSpec]:
    if isinstance(data, str):
        if data not in LLAMA3_PRESETS:
            problems.append((path, f"unknown preset {data!r}; expected one of {sorted(LLAMA3_PRESETS)}"))
            return None
        return preset(data)
    if isinstance(data, Mapping) and "preset" in data:
        name = data["preset"]
        if name not in LLAMA3_PRESETS:
            problems.append((f"{path}.preset", f"unknown preset {name!r}"))
            return None
        merged = dict(LLAMA3_PRESETS[name])
        merged.update({k: v for k, v in data.items() if k != "preset"})
        return _dataclass_from(ModelSpec, merged, path, problems)
    return _dataclass_from(ModelSpec, data, path, problems)


def parse_config(data: Mapping[str, Any], base_dir: Path = Path(".")) -> ExperimentConfig:
    """Validate a config document, collecting every problem before raising."""
    problems: List[tuple] = []
    if not isinstance(data, Mapping):
        raise ConfigError([("$", "config must be a JSON object")])
    version = data.get("schema_version")
    if version != CONFIG_SCHEMA_VERSION:
        problems.append(("schema_version", f"expected {CONFIG_SCHEMA_VERSION}, got {version!r}"))
    for k in sorted(set(data) - _TOP_KEYS):
        problems.append((k, "unknown field"))

    cluster = None
    if "cluster" not in data:
        problems.append(("cluster", "required"))
    else:
        cluster = _dataclass_from(ClusterSpec, data["cluster"], "cluster", problems)

    models: Dict[str, ModelSpec] = {}
    raw_models = data.get("models")
    if not isinstance(raw_models, Mapping) or not raw_models:
        problems.append(("models", "required: an object mapping role to a model spec or preset name"))
    else:
        for role in sorted(raw_models):
            m = _model_from(raw_models[role], f"models.{role}", problems)
            if m is not None:
                models[role] = m

    workload = _dataclass_from(WorkloadSpec, data.get("workload", {}), "workload", problems)
    iterations = data.get("iterations", 1)
    if not isinstance(iterations, int) or isinstance(iterations, bool) or iterations < 1:
        problems.append(("iterations", f"must be a positive integer, got {iterations!r}"))
        iterations = 1

    graph, workflow = None, data.get("workflow", "ppo")
    if isinstance(workflow, Mapping) and "graph_file" in workflow:
        gpath = base_dir / workflow["graph_file"]
        try:
            graph = DataflowGraph.from_json(gpath.read_text())
            workflow = "custom"
        except OSError as exc:
            problems.append(("workflow.graph_file", f"cannot read {gpath}: {exc.strerror}"))
        except ValueError as exc:
            problems.append(("workflow.graph_file", str(exc)))
    elif workflow in WORKFLOWS:
        if workload is not None:
            graph = build_workflow(workflow, iterations, workload)
    else:
        problems.append(("workflow", f"expected one of {list(WORKFLOWS)} or {{\"graph_file\": PATH}}"))
    if graph is not None:
        for v in validate(graph):
            problems.append(("workflow", str(v)))
        for role in graph.roles:
            if role not in models and not any(p[0] == f"models.{role}" for p in problems):
                problems.append((f"models.{role}", f"role used by workflow {workflow!r} has no model"))

    raw_search = data.get("search", {})
    search = None
    if not isinstance(raw_search, Mapping):
        problems.append(("search", "expected an object"))
    else:
        for k in sorted(set(raw_search) - _SEARCH_KEYS):
            problems.append((f"search.{k}", "unknown field"))
        kw = {k: v for k, v in raw_search.items() if k in _SEARCH_KEYS and k != "max_options_per_call"}
        try:
            prune = PruneConfig(raw_search.get("max_options_per_call"))
            search = SearchConfig(prune=prune, **kw)
        except (TypeError, ValueError, SearchError) as exc:
            problems.append(("search", str(exc)))

    cost = _dataclass_from(CostConfig, data.get("cost", {}), "cost", problems)

    tables: Dict[str, Path] = {}
    raw_tables = data.get("profile_tables", {})
    if not isinstance(raw_tables, Mapping):
        problems.append(("profile_tables", "expected an object mapping role to a path"))
    else:
        for role, rel in sorted(raw_tables.items()):
            p = base_dir / rel
            if role not in models:
                problems.append((f"profile_tables.{role}", "no model with this role"))
            elif not p.is_file():
                problems.append((f"profile_tables.{role}", f"file not found: {p}"))
            else:
                tables[role] = p

    outputs = data.get("outputs", {})
    out_dir = base_dir / (outputs.get("dir", "out") if isinstance(outputs, Mapping) else "out")

    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(cluster, models, graph, workflow if isinstance(workflow, str) else "custom",
                            workload, iterations, search, cost, tables, out_dir)


def load_config(path: Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError([("$", f"cannot read {path}: {exc.strerror}")]) from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([("$", f"line {exc.lineno} column {exc.colno}: {exc.msg}")]) from None
    return parse_config(data, Path(path).parent)


def _load_plan(path: Path, cfg: ExperimentConfig) -> ExecutionPlan:
    plan = ExecutionPlan.from_json(Path(path).read_text(), cfg.cluster)
    problems = validate_plan(plan, cfg.graph, cfg.cluster, cfg.models)
    if problems:
        raise ConfigError([(f"plan.calls.{p.split(':')[0]}", p.split(": ", 1)[-1]) for p in problems])
    return plan


def _fmt_bytes(n: float) -> str:
    return f"{n / 2**30:.2f} GiB"


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def summary_dict(cfg: ExperimentConfig, result) -> Dict[str, Any]:
    ev, ev0 = result.evaluation, result.initial_evaluation
    return {
        "time_cost": ev.time_cost,
        "max_mem": ev.max_mem,
        "feasible": ev.feasible,
        "initial_time_cost": ev0.time_cost,
        "initial_max_mem": ev0.max_mem,
        "initial_feasible": ev0.feasible,
        "improvement_ratio": result.improvement_ratio,
        "beta": result.beta,
        "proposals": len(result.history),
        "mem_per_device": cfg.cluster.mem_per_device,
    }


# -- subcommands ----------------------------------------------------------
def cmd_search(cfg: ExperimentConfig, out_dir: Optional[Path] = None, stdout=None) -> int:
    stdout = stdout or sys.stdout
    out_dir = Path(out_dir) if out_dir is not None else cfg.output_dir
    cost = cfg.cost_model()
    space = default_space(cfg.graph, cost, cfg.search.prune)
    empty = [name for name, opts in space.items() if not opts]
    if empty:
        print(f"error: infeasible search space, no options for calls {empty}", file=sys.stderr)
        return EXIT_FAIL
    result = mh_search(cfg.graph, cost, cfg.search, space)
    plan_text = result.plan.to_json(cfg.cluster, cfg.graph.call_names)
    _write(out_dir / "plan.json", plan_text + "\n")
    _write(out_dir / "history.csv", history_csv(result.history))
    summary = summary_dict(cfg, result)
    _write(out_dir / "summary.json", json.dumps(summary, indent=2) + "\n")
    calls = cfg.graph.calls()
    times = {n: cost.call_time(calls[n], result.plan.assignment[n]) for n in cfg.graph.call_names}
    print(result.plan.table(cfg.cluster, cfg.graph.call_names, times), file=stdout)
    print(f"TimeCost {summary['time_cost']:.4f} s  MaxMem {_fmt_bytes(summary['max_mem'])}"
          f"  improvement ratio {summary['improvement_ratio']:.4f}", file=stdout)
    if not result.evaluation.feasible:
        print("warning: no plan fitting in device memory was found", file=stdout)
    print(f"wrote {out_dir / 'plan.json'}, {out_dir / 'history.csv'}, {out_dir / 'summary.json'}", file=stdout)
    return EXIT_OK


def cmd_simulate(cfg: ExperimentConfig, plan_path: Path, trace_path: Optional[Path] = None,
                 mode: Optional[str] = None, stdout=None) -> int:
    stdout = stdout or sys.stdout
    plan = _load_plan(plan_path, cfg)
    cost = cfg.cost_model()
    t, trace, aug = time_cost(cfg.graph, plan, cost, mode or cfg.search.sim_mode)
    mem = cost.plan_memory(plan, cfg.graph).max_mem
    print(f"TimeCost {t!r}", file=stdout)
    print(f"MaxMem {mem!r} ({_fmt_bytes(mem)}, {'fits' if mem < cfg.cluster.mem_per_device else 'exceeds'}"
          f" {_fmt_bytes(cfg.cluster.mem_per_device)})", file=stdout)
    print(f"inserted nodes {len(aug.inserted())}", file=stdout)
    if trace_path is not None:
        _write(Path(trace_path), trace.to_chrome_json(cfg.cluster.gpus_per_node) + "\n")
        print(f"wrote {trace_path}", file=stdout)
    return EXIT_OK


def cmd_enumerate(cfg: ExperimentConfig, list_call: Optional[str] = None, stdout=None) -> int:
    stdout = stdout or sys.stdout
    cost = cfg.cost_model()
    space = default_space(cfg.graph, cost, cfg.search.prune)
    if list_call is not None:
        if list_call not in space:
            raise ConfigError([("--list", f"unknown call {list_call!r}; calls are {cfg.graph.call_names}")])
        for a in space[list_call]:
            s = a.strategy
            print(f"{format_mesh(a.mesh, cfg.cluster)}\tdp={s.dp}\ttp={s.tp}\tpp={s.pp}\tmbs={s.n_microbatches}",
                  file=stdout)
        return EXIT_OK
    for name in cfg.graph.call_names:
        print(f"{name}\t{len(space[name])}", file=stdout)
    print(f"log10(plans)\t{log10_space_size(space):.3f}", file=stdout)
    return EXIT_OK


def cmd_brute_force(cfg: ExperimentConfig, limit: int = 10**6, out: Optional[Path] = None,
                    stdout=None) -> int:
    stdout = stdout or sys.stdout
    cost = cfg.cost_model()
    space = default_space(cfg.graph, cost, cfg.search.prune)
    try:
        res = brute_force(cfg.graph, cost, space, limit, cfg.search.alpha, cfg.search.sim_mode)
    except SearchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    print(f"plans evaluated {res.n_evaluated}", file=stdout)
    print(f"TimeCost {res.evaluation.time_cost!r}", file=stdout)
    print(f"MaxMem {res.evaluation.max_mem!r}", file=stdout)
    if out is not None:
        _write(Path(out), res.plan.to_json(cfg.cluster, cfg.graph.call_names) + "\n")
        print(f"wrote {out}", file=stdout)
    return EXIT_OK


def parse_placement(text: str, cfg: ExperimentConfig) -> Assignment:
    """``MESH:DP,TP,PP`` such as ``trainer01:gpu[0-3]:2,2,1``."""
    mesh_text, sep, degrees = text.rpartition(":")
    if not sep:
        raise ValueError(f"placement {text!r} must look like MESH:DP,TP,PP")
    dp, tp, pp = (int(x) for x in degrees.split(","))
    return Assignment(parse_mesh(mesh_text, cfg.cluster), ParallelStrategy(dp, tp, pp))


def cmd_realloc_plan(cfg: ExperimentConfig, role: str, src: str, dst: str, out: Optional[Path] = None,
                     stdout=None) -> int:
    stdout = stdout or sys.stdout
    if role not in cfg.models:
        raise ConfigError([("--role", f"no model with role {role!r}")])
    try:
        a, b = parse_placement(src, cfg), parse_placement(dst, cfg)
    except ValueError as exc:
        raise ConfigError([("--src/--dst", str(exc))]) from None
    plan = plan_param_realloc(cfg.models[role], a, b, cfg.cluster)
    text = plan.to_json()
    if out is not None:
        _write(Path(out), text + "\n")
    print(text, file=stdout)
    return EXIT_OK


def cmd_gen_profile(cfg: ExperimentConfig, role: str, out: Path, max_tokens: int = 1 << 20,
                    contexts: Sequence[int] = (256, 1024, 2048, 4096, 8192), stdout=None) -> int:
    """Write a synthetic profile table sampled from the analytic cost model."""
    stdout = stdout or sys.stdout
    if role not in cfg.models:
        raise ConfigError([("--role", f"no model with role {role!r}")])
    c = cfg.cost
    source = AnalyticProfile(cfg.models[role], c.flops_rate, c.mem_bw, c.launch_overhead)
    meta = {"source": "analytic", "role": role, "flops_rate": c.flops_rate, "mem_bw": c.mem_bw}
    table = generate_profile_table(source, max_tokens, contexts, meta)
    _write(Path(out), table.to_json() + "\n")
    print(f"wrote {len(table.entries)} entries to {out}", file=stdout)
    return EXIT_OK


def cmd_validate(cfg: ExperimentConfig, plan_path: Optional[Path] = None, stdout=None) -> int:
    stdout = stdout or sys.stdout
    if plan_path is not None:
        plan = _load_plan(plan_path, cfg)
        ev = PlanEvaluator(cfg.graph, cfg.cost_model(), cfg.search.alpha, cfg.search.sim_mode).evaluate(plan)
        if not ev.feasible:
            print(f"note: plan peak memory {_fmt_bytes(ev.max_mem)} exceeds device capacity", file=stdout)
    print("ok", file=stdout)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rlhfplan", description="Execution-plan search for RLHF dataflows.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="greedy start plus Metropolis-Hastings search")
    p.add_argument("config", type=Path)
    p.add_argument("--out", type=Path, help="output directory (default: outputs.dir from the config)")

    p = sub.add_parser("simulate", help="TimeCost, MaxMem and a Chrome trace for a plan")
    p.add_argument("config", type=Path)
    p.add_argument("plan", type=Path)
    p.add_argument("--trace", type=Path)
    p.add_argument("--mode", choices=SIM_MODES)

    p = sub.add_parser("enumerate", help="per-call option counts")
    p.add_argument("config", type=Path)
    p.add_argument("--list", metavar="CALL", help="print every option of one call")

    p = sub.add_parser("brute-force", help="exhaustive search of a small plan space")
    p.add_argument("config", type=Path)
    p.add_argument("--limit", type=int, default=10**6)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("realloc-plan", help="broadcast plan for moving one model's parameters")
    p.add_argument("config", type=Path)
    p.add_argument("--role", required=True)
    p.add_argument("--src", required=True, help="MESH:DP,TP,PP")
    p.add_argument("--dst", required=True, help="MESH:DP,TP,PP")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("gen-profile", help="synthetic profile table from the analytic model")
    p.add_argument("config", type=Path)
    p.add_argument("--role", required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--max-tokens", type=int, default=1 << 20)
    p.add_argument("--contexts", type=int, nargs="+", default=[256, 1024, 2048, 4096, 8192])

    p = sub.add_parser("validate", help="check a config, and optionally a plan against it")
    p.add_argument("config", type=Path)
    p.add_argument("--plan", type=Path)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.command == "search":
            return cmd_search(cfg, args.out)
        if args.command == "simulate":
            return cmd_simulate(cfg, args.plan, args.trace, args.mode)
        if args.command == "enumerate":
            return cmd_enumerate(cfg, args.list)
        if args.command == "brute-force":
            return cmd_brute_force(cfg, args.limit, args.out)
        if args.command == "realloc-plan":
            return cmd_realloc_plan(cfg, args.role, args.src, args.dst, args.out)
        if args.command == "gen-profile":
            return cmd_gen_profile(cfg, args.role, args.out, args.max_tokens, args.contexts)
        return cmd_validate(cfg, args.plan)
    except ConfigError as exc:
        for path, msg in exc.problems:
            print(f"error: {path}: {msg}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
