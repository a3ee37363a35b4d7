"""RLHF dataflow graphs at the granularity of model function calls."""

from __future__ import annotations

import heapq
import json
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Any, Dict, List, Sequence, Set, Tuple

ROLES = ("actor", "critic", "reference", "reward")


class WorkflowError(ValueError):
    pass


class CallType(str, Enum):
    GENERATION = "Generation"
    INFERENCE = "Inference"
    TRAIN_STEP = "TrainStep"


class EdgeKind(str, Enum):
    DATA = "data"
    PARAMETER_VERSION = "parameter_version"


@dataclass(frozen=True)
class WorkloadSpec:
    batch_size: int = 512
    prompt_len: int = 1024
    gen_len: int = 1024
    ppo_minibatches: int = 8
    group_size: int = 1

    def __post_init__(self):
        for name in ("batch_size", "prompt_len", "gen_len", "ppo_minibatches", "group_size"):
            if getattr(self, name) < 1:
                raise WorkflowError(f"workload.{name} must be >= 1")
        if self.batch_size % self.ppo_minibatches:
            raise WorkflowError("workload.ppo_minibatches must divide batch_size")

    @property
    def seq_len(self) -> int:
        return self.prompt_len + self.gen_len

    @property
    def effective_batch(self) -> int:
        """Sequences actually processed: prompts times samples per prompt."""
        return self.batch_size * self.group_size

    def to_dict(self) -> Dict[str, int]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "WorkloadSpec":
        return cls(**data)


@dataclass(frozen=True)
class FunctionCallNode:
    id: int
    name: str  # function-call identity shared across iterations, e.g. "ActorGen"
    role: str
    call_type: CallType
    iteration: int
    workload: WorkloadSpec

    @property
    def label(self) -> str:
        return f"{self.name}@{self.iteration}"


@dataclass(frozen=True)
class DependencyEdge:
    src: int
    dst: int
    kind: EdgeKind = EdgeKind.DATA


@dataclass
class DataflowGraph:
    nodes: List[FunctionCallNode]
    edges: List[DependencyEdge]
    iterations: int
    _parents: Dict[int, List[int]] = field(default=None, init=False, repr=False, compare=False)
    _children: Dict[int, List[int]] = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self._index()

    def _index(self):
        self._by_id = {n.id: n for n in self.nodes}
        self._parents = {n.id: [] for n in self.nodes}
        self._children = {n.id: [] for n in self.nodes}
        for e in self.edges:
            if e.src in self._children and e.dst in self._parents:
                self._children[e.src].append(e.dst)
                self._parents[e.dst].append(e.src)

    def node(self, node_id: int) -> FunctionCallNode:
        return self._by_id[node_id]

    def parents(self, node_id: int) -> List[int]:
        return self._parents[node_id]

    def children(self, node_id: int) -> List[int]:
        return self._children[node_id]

    @property
    def call_names(self) -> List[str]:
        """Distinct function-call names in first-appearance order."""
        seen: Dict[str, None] = {}
        for n in sorted(self.nodes, key=lambda n: n.id):
            seen.setdefault(n.name, None)
        return list(seen)

    def calls(self) -> Dict[str, FunctionCallNode]:
        """One representative node (lowest iteration) per function-call name."""
        out: Dict[str, FunctionCallNode] = {}
        for n in sorted(self.nodes, key=lambda n: (n.iteration, n.id)):
            out.setdefault(n.name, n)
        return out

    @property
    def roles(self) -> List[str]:
        return sorted({n.role for n in self.nodes})

    def trained_roles(self) -> Set[str]:
        return {n.role for n in self.nodes if n.call_type == CallType.TRAIN_STEP}

    def topo_order(self) -> List[int]:
        """Kahn's algorithm, smallest ready id first. Raises on cycles."""
        indeg = {n.id: len(self._parents[n.id]) for n in self.nodes}
        ready = [i for i, d in indeg.items() if d == 0]
        heapq.heapify(ready)
        order = []
        while ready:
            u = heapq.heappop(ready)
            order.append(u)
            for v in self._children[u]:
                indeg[v] -= 1
                if indeg[v] == 0:
                    heapq.heappush(ready, v)
        if len(order) != len(self.nodes):
            raise WorkflowError("dataflow graph contains a cycle")
        return order

    def ancestors(self, node_id: int) -> Set[int]:
        seen: Set[int] = set()
        stack = list(self._parents[node_id])
        while stack:
            u = stack.pop()
            if u not in seen:
                seen.add(u)
                stack.extend(self._parents[u])
        return seen

    # -- serialization -------------------------------------------------
    def to_dict(self) -> Dict[str, Any]:
        return {
            "iterations": self.iterations,
            "nodes": [{"id": n.id, "name": n.name, "role": n.role, "call_type": n.call_type.value,
                       "iteration": n.iteration, "workload": n.workload.to_dict()} for n in self.nodes],
            "edges": [{"src": e.src, "dst": e.dst, "kind": e.kind.value} for e in self.edges],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DataflowGraph":
        try:
            nodes = [FunctionCallNode(int(n["id"]), n["name"], n["role"], CallType(n["call_type"]),
                                      int(n["iteration"]), WorkloadSpec.from_dict(n["workload"]))
                     for n in data["nodes"]]
            edges = [DependencyEdge(int(e["src"]), int(e["dst"]), EdgeKind(e.get("kind", "data")))
                     for e in data["edges"]]
            iterations = int(data.get("iterations", 1 + max((n.iteration for n in nodes), default=0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise WorkflowError(f"malformed graph document: {exc}") from exc
        return cls(nodes, edges, iterations)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DataflowGraph":
        return cls.from_dict(json.loads(text))


_CallDef = Tuple[str, str, CallType]


def _build(T: int, calls: Sequence[_CallDef], data_edges: Sequence[Tuple[str, str]],
           workload: WorkloadSpec) -> DataflowGraph:
    if T < 1:
        raise WorkflowError("iteration count must be >= 1")
    nodes: List[FunctionCallNode] = []
    ids: Dict[Tuple[str, int], int] = {}
    for t in range(T):
        for name, role, ctype in calls:
            ids[(name, t)] = len(nodes)
            nodes.append(FunctionCallNode(len(nodes), name, role, ctype, t, workload))
    edges = [DependencyEdge(ids[(a, t)], ids[(b, t)], EdgeKind.DATA)
             for t in range(T) for a, b in data_edges]
    edges.extend(_parameter_version_edges(nodes, T))
    return DataflowGraph(nodes, edges, T)


def _parameter_version_edges(nodes: Sequence[FunctionCallNode], T: int) -> List[DependencyEdge]:
    """TrainStep at t -> calls of the same model at t+1 that read the new weights.

    Readers are the model's generation/inference calls; a model that is only
    trained links TrainStep to TrainStep.
    """
    edges = []
    for t in range(T - 1):
        for train in (n for n in nodes if n.iteration == t and n.call_type == CallType.TRAIN_STEP):
            nxt = [n for n in nodes if n.iteration == t + 1 and n.role == train.role]
            readers = [n for n in nxt if n.call_type != CallType.TRAIN_STEP] or nxt
            edges.extend(DependencyEdge(train.id, n.id, EdgeKind.PARAMETER_VERSION) for n in readers)
    return edges


PPO_CALLS: List[_CallDef] = [
    ("ActorGen", "actor", CallType.GENERATION),
    ("RewInf", "reward", CallType.INFERENCE),
    ("RefInf", "reference", CallType.INFERENCE),
    ("CriticInf", "critic", CallType.INFERENCE),
    ("ActorTrain", "actor", CallType.TRAIN_STEP),
    ("CriticTrain", "critic", CallType.TRAIN_STEP),
]
_PPO_DATA = [("ActorGen", x) for x in ("RewInf", "RefInf", "CriticInf", "ActorTrain", "CriticTrain")] + [
    (src, dst) for src in ("RewInf", "RefInf", "CriticInf") for dst in ("ActorTrain", "CriticTrain")]


def build_ppo(T: int, workload: WorkloadSpec) -> DataflowGraph:
    return _build(T, PPO_CALLS, _PPO_DATA, replace(workload, group_size=1))


_VARIANTS: Dict[str, Tuple[List[_CallDef], List[Tuple[str, str]]]] = {
    "dpo": ([("RefInf", "reference", CallType.INFERENCE),
             ("ActorTrain", "actor", CallType.TRAIN_STEP)],
            [("RefInf", "ActorTrain")]),
    "remax": ([("ActorGen", "actor", CallType.GENERATION),
               ("ActorGenGreedy", "actor", CallType.GENERATION),
               ("RewInf", "reward", CallType.INFERENCE),
               ("RewInfGreedy", "reward", CallType.INFERENCE),
               ("ActorTrain", "actor", CallType.TRAIN_STEP)],
              [("ActorGen", "RewInf"), ("ActorGenGreedy", "RewInfGreedy"),
               ("ActorGen", "ActorTrain"), ("RewInf", "ActorTrain"), ("RewInfGreedy", "ActorTrain")]),
    "grpo": ([("ActorGen", "actor", CallType.GENERATION),
              ("RewInf", "reward", CallType.INFERENCE),
              ("RefInf", "reference", CallType.INFERENCE),
              ("ActorTrain", "actor", CallType.TRAIN_STEP)],
             [("ActorGen", "RewInf"), ("ActorGen", "RefInf"), ("ActorGen", "ActorTrain"),
              ("RewInf", "ActorTrain"), ("RefInf", "ActorTrain")]),
}

WORKFLOWS = ("ppo",) + tuple(_VARIANTS)


def build_variant(kind: str, T: int, workload: WorkloadSpec) -> DataflowGraph:
    """DPO, ReMax or GRPO graphs.

    Only GRPO keeps ``workload.group_size``; every GRPO call then processes
    ``batch_size * group_size`` sequences.
    """
    try:
        calls, data = _VARIANTS[kind]
    except KeyError:
        raise WorkflowError(f"unknown workflow variant {kind!r}; expected one of {sorted(_VARIANTS)}") from None
    if kind != "grpo":
        workload = replace(workload, group_size=1)
    return _build(T, calls, data, workload)


def build_workflow(kind: str, T: int, workload: WorkloadSpec) -> DataflowGraph:
    if kind == "ppo":
        return build_ppo(T, workload)
    return build_variant(kind, T, workload)


@dataclass(frozen=True)
class Violation:
    kind: str
    message: str

    def __str__(self):
        return f"{self.kind}: {self.message}"


def validate(graph: DataflowGraph) -> List[Violation]:
    """Structural checks; an empty list means the graph is well formed."""
    out: List[Violation] = []
    ids = [n.id for n in graph.nodes]
    if len(set(ids)) != len(ids):
        out.append(Violation("duplicate_id", "node ids are not unique"))
    known = set(ids)
    for n in graph.nodes:
        if n.iteration < 0:
            out.append(Violation("bad_iteration", f"node {n.id} has negative iteration"))
        if n.role not in ROLES:
            out.append(Violation("bad_role", f"node {n.id} has unknown role {n.role!r}"))
    for e in graph.edges:
        if e.src not in known or e.dst not in known:
            out.append(Violation("dangling_edge", f"edge {e.src}->{e.dst} references a missing node"))
        elif e.src == e.dst:
            out.append(Violation("self_loop", f"edge {e.src}->{e.dst} is a self-loop"))
    try:
        graph.topo_order()
    except WorkflowError:
        out.append(Violation("cycle", "graph contains a cycle"))

    pv = {(e.src, e.dst) for e in graph.edges if e.kind == EdgeKind.PARAMETER_VERSION}
    for role in sorted(graph.trained_roles()):
        for t in range(1, graph.iterations):
            prev_train = {n.id for n in graph.nodes
                          if n.role == role and n.iteration == t - 1 and n.call_type == CallType.TRAIN_STEP}
            cur = [n for n in graph.nodes if n.role == role and n.iteration == t]
            readers = [n for n in cur if n.call_type != CallType.TRAIN_STEP] or cur
            for n in readers:
                if not any((p, n.id) in pv for p in prev_train):
                    out.append(Violation(
                        "missing_parameter_chain",
                        f"{n.label} has no parameter_version edge from the previous {role} TrainStep"))
    return out
