"""Broadcast plans for moving parameters or data between two placements.

Parameters of a pipeline stage are split into tensor-parallel slices and
replicated along data parallelism; call outputs are split along data
parallelism and replicated along tensor parallelism. Both cases reduce to the
same problem: every destination device needs a set of pieces, several source
devices hold each piece, and each destination greedily picks the cheapest
holder (itself, then a device on the same host, then a remote host).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Dict, FrozenSet, List, Mapping, Sequence, Set, Tuple

from .cluster import ClusterSpec, link_bandwidth
from .model_arith import ModelSpec, layer_unit_params
from .strategy import Assignment, rank_layout


class ReallocError(ValueError):
    pass


def stage_layer_map(num_layers: int, pp: int) -> List[Tuple[int, int]]:
    """Contiguous [start, end) layer ranges; the first ``L % pp`` stages get one extra."""
    if pp < 1 or pp > num_layers:
        raise ReallocError(f"cannot split {num_layers} layers into {pp} stages")
    base, extra = divmod(num_layers, pp)
    ranges, start = [], 0
    for i in range(pp):
        end = start + base + (1 if i < extra else 0)
        ranges.append((start, end))
        start = end
    return ranges


@dataclass(frozen=True, order=True)
class ShardDescriptor:
    """Slices [slice_start, slice_end) of ``n_slices`` equal slices of units [start, end).

    Units are transformer layers for parameters and a single unit for a data batch.
    """

    start: int
    end: int
    slice_start: int
    slice_end: int
    n_slices: int

    def atoms(self) -> Set[Tuple[int, int, int]]:
        """(unit, slice, n_slices) cells covered by this shard."""
        return {(u, s, self.n_slices) for u in range(self.start, self.end)
                for s in range(self.slice_start, self.slice_end)}


@dataclass(frozen=True)
class BroadcastOp:
    src: int
    dst: FrozenSet[int]
    payload: ShardDescriptor
    bytes: float


@dataclass
class ReallocPlan:
    ops: List[BroadcastOp]
    total_bytes: float
    est_time: float

    def to_dict(self) -> Dict:
        return {
            "total_bytes": self.total_bytes,
            "est_time": self.est_time,
            "ops": [{"src": op.src, "dst": sorted(op.dst),
                     "layer_range": [op.payload.start, op.payload.end],
                     "slices": [op.payload.slice_start, op.payload.slice_end],
                     "n_slices": op.payload.n_slices, "bytes": op.bytes} for op in self.ops],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


EMPTY_PLAN = ReallocPlan([], 0.0, 0.0)


def _link_rank(cluster: ClusterSpec, a: int, b: int) -> Tuple[int, int]:
    if a == b:
        return (0, a)
    return (1 if cluster.node_of(a) == cluster.node_of(b) else 2, a)


def _greedy_broadcast(cluster: ClusterSpec,
                      needs: Mapping[int, Sequence[Tuple[int, int, int]]],
                      holders: Mapping[Tuple[int, int, int], Sequence[int]],
                      unit_bytes: Sequence[float], n_slices: int) -> ReallocPlan:
    """Assign each (destination, segment, slice) to its cheapest holder and group.

    ``needs`` maps a destination to (segment_start, segment_end, slice) pieces;
    ``holders`` maps the same pieces to the devices that hold them. Pieces
    already present on the destination produce no op.
    """
    chosen: Dict[Tuple[int, int, int], Dict[int, List[int]]] = {}
    for dst in sorted(needs):
        for piece in needs[dst]:
            src = min(holders[piece], key=lambda d: _link_rank(cluster, d, dst))
            if src == dst:
                continue
            seg = (src, piece[0], piece[1])
            chosen.setdefault(seg, {}).setdefault(dst, []).append(piece[2])

    grouped: Dict[Tuple[int, ShardDescriptor], Set[int]] = {}
    for (src, start, end), per_dst in chosen.items():
        for dst, slices in per_dst.items():
            for lo, hi in _runs(sorted(slices)):
                payload = ShardDescriptor(start, end, lo, hi, n_slices)
                grouped.setdefault((src, payload), set()).add(dst)

    ops = []
    per_source_time: Dict[int, float] = {}
    for (src, payload), dsts in sorted(grouped.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        nbytes = sum(unit_bytes[payload.start:payload.end]) * (payload.slice_end - payload.slice_start) / n_slices
        ops.append(BroadcastOp(src, frozenset(dsts), payload, nbytes))
        bw = min(link_bandwidth(cluster, src, d) for d in dsts)
        per_source_time[src] = per_source_time.get(src, 0.0) + comm_seconds(nbytes, bw)
    total = sum(op.bytes for op in ops)
    return ReallocPlan(ops, total, max(per_source_time.values(), default=0.0))


def comm_seconds(nbytes: float, bandwidth: float) -> float:
    if nbytes == 0 or math.isinf(bandwidth):
        return 0.0
    if bandwidth <= 0:
        raise ValueError("bandwidth must be > 0")
    return nbytes / bandwidth


def _runs(values: Sequence[int]) -> List[Tuple[int, int]]:
    runs: List[Tuple[int, int]] = []
    for v in values:
        if runs and runs[-1][1] == v:
            runs[-1] = (runs[-1][0], v + 1)
        else:
            runs.append((v, v + 1))
    return runs


def _check(model: ModelSpec, a: Assignment, cluster: ClusterSpec, what: str):
    s = a.strategy
    if s.world_size != a.mesh.size:
        raise ReallocError(f"{what}: dp*tp*pp={s.world_size} does not match mesh size {a.mesh.size}")
    if s.pp > model.num_layers:
        raise ReallocError(f"{what}: pp={s.pp} exceeds {model.num_layers} layers")
    if not a.mesh.is_valid_in(cluster):
        raise ReallocError(f"{what}: mesh outside cluster")


def param_requirements(model: ModelSpec, a: Assignment, cluster: ClusterSpec,
                       n_slices: int) -> Dict[int, Set[Tuple[int, int, int]]]:
    """Device -> (layer, slice, n_slices) atoms it holds under placement ``a``."""
    s = a.strategy
    per_rank = n_slices // s.tp
    out: Dict[int, Set[Tuple[int, int, int]]] = {}
    stages = stage_layer_map(model.num_layers, s.pp)
    for (p, d, t), dev in rank_layout(a, cluster.gpus_per_node).items():
        start, end = stages[p]
        out.setdefault(dev, set()).update(
            (u, k, n_slices) for u in range(start, end) for k in range(t * per_rank, (t + 1) * per_rank))
    return out


def plan_param_realloc(model: ModelSpec, src: Assignment, dst: Assignment,
                       cluster: ClusterSpec) -> ReallocPlan:
    """Redistribute one model's parameters from ``src`` to ``dst``.

    Outer loop over pipeline-stage pairs with overlapping layers; inner loop
    over destination devices and the TP slices they need (at the granularity of
    lcm(tp_src, tp_dst) slices per layer).
    """
    _check(model, src, cluster, "source")
    _check(model, dst, cluster, "destination")
    if src == dst:
        return EMPTY_PLAN
    s1, s2 = src.strategy, dst.strategy
    n_slices = s1.tp * s2.tp // math.gcd(s1.tp, s2.tp)
    g1, g2 = n_slices // s1.tp, n_slices // s2.tp
    stages1 = stage_layer_map(model.num_layers, s1.pp)
    stages2 = stage_layer_map(model.num_layers, s2.pp)
    lay1 = rank_layout(src, cluster.gpus_per_node)
    lay2 = rank_layout(dst, cluster.gpus_per_node)

    needs: Dict[int, List[Tuple[int, int, int]]] = {}
    holders: Dict[Tuple[int, int, int], List[int]] = {}
    for i, (a0, a1) in enumerate(stages1):
        for j, (b0, b1) in enumerate(stages2):
            lo, hi = max(a0, b0), min(a1, b1)
            if lo >= hi:
                continue
            for (p, d, t), dev in lay1.items():
                if p == i:
                    for k in range(t * g1, (t + 1) * g1):
                        holders.setdefault((lo, hi, k), []).append(dev)
            for (p, d, t), dev in lay2.items():
                if p == j:
                    needs.setdefault(dev, []).extend((lo, hi, k) for k in range(t * g2, (t + 1) * g2))
    unit_bytes = [n * model.param_bytes for n in layer_unit_params(model)]
    return _greedy_broadcast(cluster, needs, holders, unit_bytes, n_slices)


def data_requirements(a: Assignment, cluster: ClusterSpec, n_slices: int,
                      producer: bool) -> Dict[int, Set[Tuple[int, int, int]]]:
    """Device -> batch atoms. Producers hold outputs on their last pipeline
    stage, consumers need inputs on their first; TP ranks replicate."""
    s = a.strategy
    per_rank = n_slices // s.dp
    stage = s.pp - 1 if producer else 0
    out: Dict[int, Set[Tuple[int, int, int]]] = {}
    for (p, d, t), dev in rank_layout(a, cluster.gpus_per_node).items():
        if p == stage:
            out.setdefault(dev, set()).update((0, k, n_slices) for k in range(d * per_rank, (d + 1) * per_rank))
    return out


def plan_data_transfer(producer: Assignment, consumer: Assignment, data_bytes: float,
                       cluster: ClusterSpec) -> ReallocPlan:
    """Move a batch of ``data_bytes`` total from producer to consumer placements.

    Same greedy broadcast as parameters, with DP indexing disjoint shards and
    TP indexing replicas.
    """
    if data_bytes < 0:
        raise ReallocError("data_bytes must be >= 0")
    for a, what in ((producer, "producer"), (consumer, "consumer")):
        if a.strategy.world_size != a.mesh.size or not a.mesh.is_valid_in(cluster):
            raise ReallocError(f"{what} placement is invalid")
    if producer == consumer or data_bytes == 0:
        return EMPTY_PLAN
    dp1, dp2 = producer.strategy.dp, consumer.strategy.dp
    n_slices = dp1 * dp2 // math.gcd(dp1, dp2)
    held = data_requirements(producer, cluster, n_slices, producer=True)
    wanted = data_requirements(consumer, cluster, n_slices, producer=False)
    holders: Dict[Tuple[int, int, int], List[int]] = {}
    for dev in sorted(held):
        for (_, k, _) in held[dev]:
            holders.setdefault((0, 1, k), []).append(dev)
    needs = {dev: [(0, 1, k) for (_, k, _) in sorted(atoms)] for dev, atoms in wanted.items()}
    return _greedy_broadcast(cluster, needs, holders, [float(data_bytes)], n_slices)
