"""Parallelization strategies, per-call option spaces and execution plans."""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

from .cluster import ClusterSpec, DeviceMesh, enumerate_meshes, format_mesh, mesh_violations, parse_mesh
from .model_arith import ModelSpec
from .workflow import CallType, DataflowGraph, FunctionCallNode

PLAN_SCHEMA_VERSION = 1


class PlanError(ValueError):
    pass


def is_power_of_two(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


@dataclass(frozen=True, order=True)
class ParallelStrategy:
    dp: int
    tp: int
    pp: int
    n_microbatches: int = 1

    def __post_init__(self):
        if min(self.dp, self.tp, self.pp) < 1:
            raise PlanError("parallel degrees must be >= 1")
        if not is_power_of_two(self.n_microbatches):
            raise PlanError(f"n_microbatches must be a power of two, got {self.n_microbatches}")

    @property
    def world_size(self) -> int:
        return self.dp * self.tp * self.pp


@dataclass(frozen=True, order=True)
class Assignment:
    """Where and how one function call runs."""

    mesh: DeviceMesh
    strategy: ParallelStrategy


@dataclass
class ExecutionPlan:
    assignment: Dict[str, Assignment]
    offload: Dict[str, bool] = field(default_factory=dict)

    def key(self) -> Tuple:
        """Canonical hashable identity, used for memoization."""
        return tuple((name, a, bool(self.offload.get(name, False)))
                     for name, a in sorted(self.assignment.items()))

    def with_assignment(self, call: str, option: Assignment) -> "ExecutionPlan":
        new = dict(self.assignment)
        new[call] = option
        return ExecutionPlan(new, dict(self.offload))

    def offloaded(self, call: str) -> bool:
        return bool(self.offload.get(call, False))

    # -- serialization -------------------------------------------------
    def to_dict(self, cluster: ClusterSpec, order: Optional[Sequence[str]] = None) -> Dict:
        names = list(order) if order is not None else sorted(self.assignment)
        calls = {}
        for name in names:
            a = self.assignment[name]
            s = a.strategy
            calls[name] = {"mesh": format_mesh(a.mesh, cluster), "dp": s.dp, "tp": s.tp, "pp": s.pp,
                           "n_microbatches": s.n_microbatches, "offload": self.offloaded(name)}
        return {"schema_version": PLAN_SCHEMA_VERSION, "calls": calls}

    @classmethod
    def from_dict(cls, data: Mapping, cluster: ClusterSpec) -> "ExecutionPlan":
        if data.get("schema_version", PLAN_SCHEMA_VERSION) != PLAN_SCHEMA_VERSION:
            raise PlanError(f"unsupported plan schema_version {data.get('schema_version')!r}")
        assignment, offload = {}, {}
        for name, c in data["calls"].items():
            try:
                strategy = ParallelStrategy(int(c["dp"]), int(c["tp"]), int(c["pp"]),
                                            int(c.get("n_microbatches", 1)))
                assignment[name] = Assignment(parse_mesh(c["mesh"], cluster), strategy)
            except (KeyError, TypeError, ValueError) as exc:
                raise PlanError(f"calls.{name}: {exc}") from exc
            offload[name] = bool(c.get("offload", False))
        return cls(assignment, offload)

    def to_json(self, cluster: ClusterSpec, order: Optional[Sequence[str]] = None) -> str:
        return json.dumps(self.to_dict(cluster, order), indent=2)

    @classmethod
    def from_json(cls, text: str, cluster: ClusterSpec) -> "ExecutionPlan":
        return cls.from_dict(json.loads(text), cluster)

    def table(self, cluster: ClusterSpec, order: Optional[Sequence[str]] = None,
              times: Optional[Mapping[str, float]] = None) -> str:
        """Plain-text table: call, mesh, TP, PP, DP, micro-batches[, time]."""
        names = list(order) if order is not None else sorted(self.assignment)
        header = ["", "DeviceMesh", "TP", "PP", "DP", "#Micro-Batches"] + (["Time"] if times else [])
        rows = [header]
        for name in names:
            a = self.assignment[name]
            row = [name, format_mesh(a.mesh, cluster), str(a.strategy.tp), str(a.strategy.pp),
                   str(a.strategy.dp), str(a.strategy.n_microbatches)]
            if times:
                row.append(f"{times[name]:.4g}")
            rows.append(row)
        widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
        return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows)


@dataclass(frozen=True)
class PruneConfig:
    # keep only the k options with the lowest standalone call time
    max_options_per_call: Optional[int] = None

    def __post_init__(self):
        if self.max_options_per_call is not None and self.max_options_per_call < 1:
            raise PlanError("max_options_per_call must be >= 1")


def unit_batch(node: FunctionCallNode) -> int:
    """Sequences processed in one pass: a PPO minibatch for training, else the batch."""
    batch = node.workload.effective_batch
    if node.call_type == CallType.TRAIN_STEP:
        return batch // node.workload.ppo_minibatches
    return batch


def enumerate_strategies(size: int, cluster: ClusterSpec, model: ModelSpec, batch: int) -> List[ParallelStrategy]:
    """(dp, tp, pp, mbs) covering exactly ``size`` devices.

    tp is a power of two dividing the head count and at most one host wide;
    pp is at most the layer count; micro-batch counts are powers of two with
    dp * mbs <= batch.
    """
    out = []
    tp = 1
    while tp <= min(size, cluster.gpus_per_node):
        if size % tp == 0 and model.num_attention_heads % tp == 0:
            rest = size // tp
            for pp in range(1, min(rest, model.num_layers) + 1):
                if rest % pp:
                    continue
                dp = rest // pp
                mbs = 1
                while dp * mbs <= batch:
                    out.append(ParallelStrategy(dp, tp, pp, mbs))
                    mbs *= 2
        tp *= 2
    return out


def enumerate_options(node: FunctionCallNode, cluster: ClusterSpec, model: ModelSpec,
                      prune: Optional[PruneConfig] = None,
                      solo_cost: Optional[Callable[[FunctionCallNode, Assignment], float]] = None,
                      ) -> List[Assignment]:
    batch = unit_batch(node)
    by_size: Dict[int, List[ParallelStrategy]] = {}
    options = []
    for mesh in enumerate_meshes(cluster):
        if mesh.size not in by_size:
            by_size[mesh.size] = enumerate_strategies(mesh.size, cluster, model, batch)
        options.extend(Assignment(mesh, s) for s in by_size[mesh.size])
    cap = prune.max_options_per_call if prune else None
    if cap is not None and len(options) > cap:
        if solo_cost is None:
            raise PlanError("pruning by option count needs a solo cost function")
        ranked = sorted(range(len(options)), key=lambda i: (solo_cost(node, options[i]), i))
        keep = sorted(ranked[:cap])
        options = [options[i] for i in keep]
    return options


OptionSpace = Dict[str, List[Assignment]]


def build_option_space(graph: DataflowGraph, cluster: ClusterSpec, models: Mapping[str, ModelSpec],
                       prune: Optional[PruneConfig] = None,
                       solo_cost: Optional[Callable[[FunctionCallNode, Assignment], float]] = None,
                       ) -> OptionSpace:
    calls = graph.calls()
    return {name: enumerate_options(calls[name], cluster, models[calls[name].role], prune, solo_cost)
            for name in graph.call_names}


def log10_space_size(space: OptionSpace) -> float:
    return sum(math.log10(len(opts)) for opts in space.values()) if all(space.values()) else float("-inf")


def mutate(plan: ExecutionPlan, space: OptionSpace, rng: random.Random) -> ExecutionPlan:
    """Re-draw one uniformly chosen call's assignment among its other options.

    The proposal is symmetric, so Metropolis-Hastings needs no Hastings
    correction. A call with a single option yields the plan unchanged.
    """
    names = sorted(space)
    call = names[rng.randrange(len(names))]
    options = space[call]
    if len(options) < 2:
        return plan
    current = plan.assignment.get(call)
    if current not in options:
        return plan.with_assignment(call, options[rng.randrange(len(options))])
    pick = rng.randrange(len(options) - 1)
    if pick >= options.index(current):
        pick += 1
    return plan.with_assignment(call, options[pick])


def rank_layout(assignment: Assignment, gpus_per_node: int) -> Dict[Tuple[int, int, int], int]:
    """Map (pp_rank, dp_rank, tp_rank) to a global device index.

    Ranks are laid out pipeline-outermost and tensor-innermost over the mesh's
    host-major device list, so TP groups stay inside a host.
    """
    s = assignment.strategy
    devices = assignment.mesh.devices(gpus_per_node)
    layout = {}
    for p in range(s.pp):
        for d in range(s.dp):
            for t in range(s.tp):
                layout[(p, d, t)] = devices[(p * s.dp + d) * s.tp + t]
    return layout


def validate_plan(plan: ExecutionPlan, graph: DataflowGraph, cluster: ClusterSpec,
                  models: Optional[Mapping[str, ModelSpec]] = None) -> List[str]:
    problems = []
    calls = graph.calls()
    for name in graph.call_names:
        if name not in plan.assignment:
            problems.append(f"{name}: no assignment")
    for name, a in sorted(plan.assignment.items()):
        if name not in calls:
            problems.append(f"{name}: not a function call of this graph")
        for msg in mesh_violations(a.mesh, cluster):
            problems.append(f"{name}: {msg}")
        s = a.strategy
        if s.world_size != a.mesh.size:
            problems.append(f"{name}: dp*tp*pp = {s.world_size} but mesh has {a.mesh.size} devices")
        if s.tp > cluster.gpus_per_node:
            problems.append(f"{name}: tp={s.tp} exceeds gpus per node")
        if models is not None and name in calls:
            model = models[calls[name].role]
            if model.num_attention_heads % s.tp:
                problems.append(f"{name}: tp={s.tp} does not divide {model.num_attention_heads} heads")
            if s.pp > model.num_layers:
                problems.append(f"{name}: pp={s.pp} exceeds {model.num_layers} layers")
    return problems
