"""Augmented dataflow graphs and the list-scheduling TimeCost simulation."""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Optional, Tuple

from .cost_model import CostModel
from .strategy import ExecutionPlan
from .workflow import DataflowGraph, EdgeKind

CALL = "call"
DATA_TRANSFER = "data_transfer"
PARAM_REALLOC = "param_realloc"
OFFLOAD = "offload"
ONLOAD = "onload"

VERBATIM = "verbatim"
CORRECTED = "corrected"
SIM_MODES = (VERBATIM, CORRECTED)


class SimulationError(ValueError):
    pass


@dataclass
class AugNode:
    id: int
    name: str
    kind: str
    devices: FrozenSet[int]
    duration: float
    call_id: Optional[int] = None  # originating function-call node, if any


@dataclass
class AugmentedGraph:
    nodes: List[AugNode] = field(default_factory=list)
    children: Dict[int, List[int]] = field(default_factory=dict)
    parents: Dict[int, List[int]] = field(default_factory=dict)

    def add_node(self, name: str, kind: str, devices: FrozenSet[int], duration: float,
                 call_id: Optional[int] = None, node_id: Optional[int] = None) -> int:
        nid = len(self.nodes) if node_id is None else node_id
        if nid != len(self.nodes):
            raise SimulationError("augmented node ids must be dense and ascending")
        if duration < 0:
            raise SimulationError(f"negative duration for {name}")
        self.nodes.append(AugNode(nid, name, kind, frozenset(devices), duration, call_id))
        self.children[nid] = []
        self.parents[nid] = []
        return nid

    def add_edge(self, u: int, v: int):
        self.children[u].append(v)
        self.parents[v].append(u)

    def inserted(self, kind: Optional[str] = None) -> List[AugNode]:
        return [n for n in self.nodes if n.kind != CALL and (kind is None or n.kind == kind)]

    def topo_order(self) -> List[int]:
        indeg = {n.id: len(self.parents[n.id]) for n in self.nodes}
        ready = [i for i, d in indeg.items() if d == 0]
        heapq.heapify(ready)
        order = []
        while ready:
            u = heapq.heappop(ready)
            order.append(u)
            for v in self.children[u]:
                indeg[v] -= 1
                if indeg[v] == 0:
                    heapq.heappush(ready, v)
        if len(order) != len(self.nodes):
            raise SimulationError("augmented graph contains a cycle")
        return order


def model_predecessors(graph: DataflowGraph) -> Dict[int, List[int]]:
    """For each call, the latest earlier calls on the same model.

    These are the same-model ancestors not themselves ancestors of another
    same-model ancestor; parameters flow from them into the call.
    """
    cached = getattr(graph, "_model_pred", None)
    if cached is not None:
        return cached
    anc = {n.id: graph.ancestors(n.id) for n in graph.nodes}
    out = {}
    for n in graph.nodes:
        same = [a for a in anc[n.id] if graph.node(a).role == n.role]
        out[n.id] = sorted(a for a in same if not any(a in anc[b] for b in same if b != a))
    graph._model_pred = out
    return out


def augment(graph: DataflowGraph, plan: ExecutionPlan, cost: CostModel) -> AugmentedGraph:
    """Insert transfer, reallocation and offload nodes for ``plan``.

    * a data edge between calls with different placements gets a
      ``data_transfer`` node spanning both meshes;
    * a call whose model last ran elsewhere (or with another strategy) gets a
      ``param_realloc`` node from that predecessor, unless some latest
      predecessor already matches its placement;
    * an offloaded call is followed by an ``offload`` node; the model's next
      call is preceded by an ``onload`` node instead of a reallocation.
    """
    g = cost.cluster.gpus_per_node
    aug = AugmentedGraph()
    place = {n.id: plan.assignment[n.name] for n in graph.nodes}
    devs = {nid: a.mesh.device_set(g) for nid, a in place.items()}
    for n in sorted(graph.nodes, key=lambda n: n.id):
        aug.add_node(n.label, CALL, devs[n.id], cost.call_time(n, place[n.id]), call_id=n.id, node_id=n.id)
    ids = sorted(n.id for n in graph.nodes)
    if ids != list(range(len(ids))):
        raise SimulationError("function-call node ids must be 0..n-1")

    for e in graph.edges:
        u, v = graph.node(e.src), graph.node(e.dst)
        if e.kind == EdgeKind.DATA and place[u.id] != place[v.id]:
            plan_ = cost.data_transfer(u, place[u.id], place[v.id])
            x = aug.add_node(f"{u.label}->{v.label}", DATA_TRANSFER, devs[u.id] | devs[v.id],
                             plan_.est_time, call_id=v.id)
            aug.add_edge(u.id, x)
            aug.add_edge(x, v.id)
        else:
            aug.add_edge(u.id, v.id)

    offload_node = {}
    for n in sorted(graph.nodes, key=lambda n: n.id):
        if plan.offloaded(n.name):
            x = aug.add_node(f"offload {n.label}", OFFLOAD, devs[n.id],
                             cost.offload_time(n.role, place[n.id]), call_id=n.id)
            aug.add_edge(n.id, x)
            offload_node[n.id] = x

    for n in sorted(graph.nodes, key=lambda n: n.id):
        preds = model_predecessors(graph)[n.id]
        if not preds:
            continue
        on_device = [p for p in preds if p not in offload_node]
        if any(place[p] == place[n.id] for p in on_device):
            continue
        if on_device:
            p = on_device[0]
            plan_ = cost.param_realloc(n.role, place[p], place[n.id])
            x = aug.add_node(f"realloc {graph.node(p).label}->{n.label}", PARAM_REALLOC,
                             devs[p] | devs[n.id], plan_.est_time, call_id=n.id)
            aug.add_edge(p, x)
        else:
            p = preds[0]
            x = aug.add_node(f"onload {n.label}", ONLOAD, devs[n.id],
                             cost.offload_time(n.role, place[n.id]), call_id=n.id)
            aug.add_edge(offload_node[p], x)
        aug.add_edge(x, n.id)
    return aug


@dataclass(frozen=True)
class SimEvent:
    node_id: int
    name: str
    kind: str
    ready: float
    start: float
    end: float
    devices: FrozenSet[int]


@dataclass
class SimTrace:
    events: List[SimEvent]

    def by_id(self) -> Dict[int, SimEvent]:
        return {e.node_id: e for e in self.events}

    def to_chrome(self, gpus_per_node: int) -> Dict:
        """Chrome trace-event document: one complete ("X") event per node per device."""
        out = []
        for e in self.events:
            for d in sorted(e.devices):
                out.append({"name": e.name, "cat": e.kind, "ph": "X",
                            "ts": e.start * 1e6, "dur": (e.end - e.start) * 1e6,
                            "pid": d // gpus_per_node, "tid": d % gpus_per_node,
                            "args": {"node_id": e.node_id}})
        meta = []
        for pid in sorted({ev["pid"] for ev in out}):
            meta.append({"name": "process_name", "ph": "M", "pid": pid, "tid": 0,
                         "args": {"name": f"node{pid}"}})
        return {"traceEvents": meta + out, "displayTimeUnit": "ms"}

    def to_chrome_json(self, gpus_per_node: int) -> str:
        return json.dumps(self.to_chrome(gpus_per_node), indent=1)


def simulate(aug: AugmentedGraph, mode: str = VERBATIM) -> Tuple[float, SimTrace]:
    """TimeCost of an augmented graph by priority-queue list scheduling.

    Nodes are popped in order of ReadyTime (ties by node id) and start at the
    later of ReadyTime and the end of ``D.last``, the last node recorded on
    their device set. After a node finishes, every overlapping device set
    ``D'`` adopts it as ``D'.last`` when ``D'.last`` ended no later than
    ``D.last`` did before this node (``verbatim``) or than this node
    (``corrected``). In ``corrected`` mode no two nodes sharing a device
    overlap in time; ``verbatim`` can leave a stale ``D'.last`` behind.
    """
    if mode not in SIM_MODES:
        raise SimulationError(f"unknown simulation mode {mode!r}")
    aug.topo_order()
    meshes: Dict[FrozenSet[int], int] = {}
    for n in aug.nodes:
        if n.devices and n.devices not in meshes:
            meshes[n.devices] = len(meshes)
    mesh_list = list(meshes)
    overlapping = [[j for j, other in enumerate(mesh_list) if m & other] for m in mesh_list]
    last_end = [0.0] * len(mesh_list)

    ready = [0.0] * len(aug.nodes)
    waiting = [len(aug.parents[n.id]) for n in aug.nodes]
    heap = [(0.0, n.id) for n in aug.nodes if waiting[n.id] == 0]
    heapq.heapify(heap)
    events: List[SimEvent] = []
    makespan = 0.0
    while heap:
        r, v = heapq.heappop(heap)
        node = aug.nodes[v]
        if node.devices:
            D = meshes[node.devices]
            d_last = last_end[D]
            start = max(r, d_last)
            end = start + node.duration
            ref = d_last if mode == VERBATIM else end
            for j in overlapping[D]:
                if last_end[j] <= ref:
                    last_end[j] = end
        else:
            start = r
            end = start + node.duration
        events.append(SimEvent(v, node.name, node.kind, r, start, end, node.devices))
        makespan = max(makespan, end)
        for u in aug.children[v]:
            ready[u] = max(ready[u], end)
            waiting[u] -= 1
            if waiting[u] == 0:
                heapq.heappush(heap, (ready[u], u))
    return makespan, SimTrace(events)


def time_cost(graph: DataflowGraph, plan: ExecutionPlan, cost: CostModel,
              mode: str = VERBATIM) -> Tuple[float, SimTrace, AugmentedGraph]:
    aug = augment(graph, plan, cost)
    t, trace = simulate(aug, mode)
    return t, trace, aug
