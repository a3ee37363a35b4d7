"""Time and memory estimates for function calls and execution plans.

Per-layer operation times come from a :class:`ProfileTable` (measured at
power-of-two token counts and linearly interpolated) or from
:class:`AnalyticProfile`, a FLOPs/bandwidth model usable without GPUs.
Communication is priced as bytes over link bandwidth.
"""

from __future__ import annotations

import bisect
import json
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Mapping, Optional, Protocol, Tuple

from .cluster import ClusterSpec, link_bandwidth
from .model_arith import (ModelSpec, head_forward_macs, layer_forward_macs, layer_param_count,
                          layer_unit_params)
from .realloc import ReallocPlan, comm_seconds, plan_data_transfer, plan_param_realloc, stage_layer_map
from .strategy import Assignment, ExecutionPlan, is_power_of_two, rank_layout
from .workflow import CallType, DataflowGraph, FunctionCallNode

COMPUTE_OPS = ("layer_fwd", "layer_bwd", "layer_opt_step", "embed_fwd", "head_fwd")
COMM_OPS = ("tp_allreduce", "pp_p2p")
OP_KINDS = COMPUTE_OPS + COMM_OPS


class CostModelError(ValueError):
    pass


def comm_time(nbytes: float, bandwidth: float) -> float:
    """Seconds to move ``nbytes`` over a link; local (infinite) links are free."""
    return comm_seconds(nbytes, bandwidth)


class TimeSource(Protocol):
    def has(self, op_kind: str) -> bool: ...

    def time(self, op_kind: str, tokens: float, context_len: float) -> float: ...


@dataclass
class ProfileTable:
    entries: Dict[Tuple[str, int, int], float]
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        for (op, tokens, ctx), secs in self.entries.items():
            if op not in OP_KINDS:
                raise CostModelError(f"unknown op_kind {op!r} in profile table")
            if not is_power_of_two(tokens):
                raise CostModelError(f"token key {tokens} for {op} is not a power of two")
            if not secs > 0:
                raise CostModelError(f"non-positive time for {(op, tokens, ctx)}")
        self._index: Dict[str, Dict[int, Tuple[List[int], List[float]]]] = {}
        for (op, tokens, ctx), secs in sorted(self.entries.items()):
            xs, ys = self._index.setdefault(op, {}).setdefault(ctx, ([], []))
            xs.append(tokens)
            ys.append(secs)

    def has(self, op_kind: str) -> bool:
        return op_kind in self._index

    def time(self, op_kind: str, tokens: float, context_len: float) -> float:
        return interp_time(self, op_kind, tokens, context_len)

    def scaled(self, factor: float) -> "ProfileTable":
        return ProfileTable({k: v * factor for k, v in self.entries.items()}, dict(self.metadata))

    def to_dict(self) -> Dict[str, Any]:
        return {"metadata": self.metadata,
                "entries": [{"op_kind": op, "tokens": t, "context_len": c, "seconds": s}
                            for (op, t, c), s in sorted(self.entries.items())]}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ProfileTable":
        try:
            entries = {(e["op_kind"], int(e["tokens"]), int(e["context_len"])): float(e["seconds"])
                       for e in data["entries"]}
        except (KeyError, TypeError, ValueError) as exc:
            raise CostModelError(f"malformed profile table: {exc}") from exc
        return cls(entries, dict(data.get("metadata", {})))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ProfileTable":
        return cls.from_dict(json.loads(text))


def _interp_1d(xs: List[float], ys: List[float], x: float) -> float:
    if len(xs) == 1:
        return ys[0] * x / xs[0]
    i = bisect.bisect_left(xs, x)
    if i < len(xs) and xs[i] == x:
        return ys[i]
    i = min(max(i, 1), len(xs) - 1)
    x0, x1, y0, y1 = xs[i - 1], xs[i], ys[i - 1], ys[i]
    return y0 + (y1 - y0) * (x - x0) / (x1 - x0)


def interp_time(table: ProfileTable, op_kind: str, tokens: float, context_len: float) -> float:
    """Piecewise-linear lookup in tokens, then in context length.

    Exact at profiled keys; linear extrapolation from the two nearest keys
    outside the profiled range, clamped at zero. A single profiled token count
    is scaled proportionally; a single context length is used as is.
    """
    if not table.has(op_kind):
        raise CostModelError(f"profile table has no entries for {op_kind!r}")
    by_ctx = table._index[op_kind]
    ctxs = sorted(by_ctx)
    if context_len in by_ctx or len(ctxs) == 1:
        xs, ys = by_ctx[context_len if context_len in by_ctx else ctxs[0]]
        return max(0.0, _interp_1d(xs, ys, tokens))
    i = bisect.bisect_left(ctxs, context_len)
    i = min(max(i, 1), len(ctxs) - 1)
    c0, c1 = ctxs[i - 1], ctxs[i]
    t0 = _interp_1d(*by_ctx[c0], tokens)
    t1 = _interp_1d(*by_ctx[c1], tokens)
    return max(0.0, t0 + (t1 - t0) * (context_len - c0) / (c1 - c0))


@dataclass(frozen=True)
class AnalyticProfile:
    """Per-layer times from FLOPs at an achievable rate plus bytes at memory bandwidth.

    Every op pays its weight traffic once (``params * bytes / mem_bw``), which
    is what makes single-token decode memory-bound, plus a fixed launch cost.
    Communication ops are not modelled here.
    """

    spec: ModelSpec
    flops_rate: float = 400e12
    mem_bw: float = 2.0e12
    launch_overhead: float = 2e-5

    def has(self, op_kind: str) -> bool:
        return op_kind in COMPUTE_OPS

    def time(self, op_kind: str, tokens: float, context_len: float) -> float:
        s = self.spec
        if op_kind == "layer_fwd":
            fl = 2 * tokens * layer_forward_macs(s, int(context_len))
            by = layer_param_count(s) * s.param_bytes
        elif op_kind == "layer_bwd":
            fl = 4 * tokens * layer_forward_macs(s, int(context_len))
            by = layer_param_count(s) * (s.param_bytes + s.grad_bytes)
        elif op_kind == "layer_opt_step":
            fl = 0
            by = 2 * layer_param_count(s) * (s.param_bytes + s.grad_bytes + s.optimizer_bytes_per_param)
        elif op_kind == "embed_fwd":
            fl = 0
            by = tokens * s.hidden_size * s.param_bytes
        elif op_kind == "head_fwd":
            fl = 2 * tokens * head_forward_macs(s)
            by = head_forward_macs(s) * s.param_bytes
        else:
            raise CostModelError(f"analytic profile does not model {op_kind!r}")
        return fl / self.flops_rate + by / self.mem_bw + self.launch_overhead


def generate_profile_table(source: TimeSource, max_tokens: int, contexts: Iterable[int],
                           metadata: Optional[Dict[str, Any]] = None) -> ProfileTable:
    """Sample a time source at powers of two up to ``max_tokens``."""
    entries = {}
    contexts = sorted(set(contexts))
    tokens_keys = [1 << k for k in range(int(math.log2(max_tokens)) + 1)]
    for op in COMPUTE_OPS:
        op_ctxs = contexts if op in ("layer_fwd", "layer_bwd") else [0]
        op_tokens = [1] if op == "layer_opt_step" else tokens_keys
        for c in op_ctxs:
            for t in op_tokens:
                entries[(op, t, c)] = source.time(op, t, c)
    return ProfileTable(entries, dict(metadata or {}))


@dataclass(frozen=True)
class CostConfig:
    flops_rate: float = 400e12
    mem_bw: float = 2.0e12
    launch_overhead: float = 2e-5
    # shard gradients and optimizer states over DP ranks too (ZeRO-1/2 style)
    dp_shard_optimizer: bool = False
    # keep only layer inputs for backward and recompute the rest (one extra forward)
    activation_recompute: bool = True
    # bytes per token emitted by generation (token id + log-prob) and inference
    gen_output_bytes_per_token: int = 8
    inf_output_bytes_per_token: int = 4


@dataclass(frozen=True)
class MemoryBreakdown:
    static: float
    active: float

    @property
    def total(self) -> float:
        return self.static + self.active


@dataclass
class MemoryReport:
    per_device_peak: Dict[int, float]
    breakdown: Dict[int, MemoryBreakdown]
    max_mem: float


@dataclass
class CostEstimate:
    time: float
    per_device_peak_mem: Dict[int, float]
    max_mem: float


class CostModel:
    """Prices function calls, transfers and plan memory for one experiment."""

    def __init__(self, cluster: ClusterSpec, models: Mapping[str, ModelSpec],
                 profiles: Optional[Mapping[str, TimeSource]] = None,
                 config: Optional[CostConfig] = None):
        self.cluster = cluster
        self.models = dict(models)
        self.config = config or CostConfig()
        self.sources: Dict[str, TimeSource] = {}
        for role, spec in self.models.items():
            src = (profiles or {}).get(role)
            if src is None:
                src = AnalyticProfile(spec, self.config.flops_rate, self.config.mem_bw,
                                      self.config.launch_overhead)
            missing = [op for op in COMPUTE_OPS if not src.has(op)]
            if missing:
                raise CostModelError(f"profile for {role!r} lacks ops {missing}")
            self.sources[role] = src
        self._call_cache: Dict[Tuple, float] = {}
        self._bw_cache: Dict[Assignment, Tuple[float, float, float]] = {}
        self._transfer_cache: Dict[Tuple, ReallocPlan] = {}
        self._mem_cache: Dict[Tuple, Dict[int, float]] = {}

    # -- primitive lookups -------------------------------------------------
    def op_time(self, role: str, op_kind: str, tokens: float, context_len: float) -> float:
        return self.sources[role].time(op_kind, tokens, context_len)

    def group_bandwidths(self, a: Assignment) -> Tuple[float, float, float]:
        """Slowest link inside TP groups, DP groups and between pipeline stages."""
        if a in self._bw_cache:
            return self._bw_cache[a]
        s = a.strategy
        lay = rank_layout(a, self.cluster.gpus_per_node)
        bw = lambda x, y: link_bandwidth(self.cluster, x, y)
        tp_bw = min((bw(lay[(0, 0, 0)], lay[(0, 0, t)]) for t in range(1, s.tp)), default=math.inf)
        dp_bw = min((bw(lay[(0, 0, 0)], lay[(0, d, 0)]) for d in range(1, s.dp)), default=math.inf)
        pp_bw = min((bw(lay[(p, 0, 0)], lay[(p + 1, 0, 0)]) for p in range(s.pp - 1)), default=math.inf)
        self._bw_cache[a] = (tp_bw, dp_bw, pp_bw)
        return self._bw_cache[a]

    def _tp_allreduce(self, role: str, a: Assignment, tokens: float) -> float:
        """One activation all-reduce of tokens x hidden across the TP group (ring)."""
        tp = a.strategy.tp
        if tp == 1:
            return 0.0
        src = self.sources[role]
        if src.has("tp_allreduce"):
            return src.time("tp_allreduce", tokens, 0)
        spec = self.models[role]
        nbytes = 2 * (tp - 1) / tp * tokens * spec.hidden_size * spec.param_bytes
        return comm_time(nbytes, self.group_bandwidths(a)[0])

    def _pp_p2p(self, role: str, a: Assignment, tokens: float) -> float:
        if a.strategy.pp == 1:
            return 0.0
        src = self.sources[role]
        if src.has("pp_p2p"):
            return src.time("pp_p2p", tokens, 0)
        spec = self.models[role]
        return comm_time(tokens * spec.hidden_size * spec.param_bytes, self.group_bandwidths(a)[2])

    def stage_times(self, role: str, a: Assignment, tokens: float, context_len: float,
                    backward: bool) -> List[Tuple[float, float]]:
        """(forward, backward) seconds per pipeline stage for one micro-batch.

        A layer costs its profiled time divided by tp plus two TP all-reduces
        per pass; stage 0 adds the embedding, the last stage the output head
        (backward of either is twice its forward); every stage of a pipeline
        pays one activation send per pass.
        """
        s = a.strategy
        spec = self.models[role]
        tp = s.tp
        ar = 2 * self._tp_allreduce(role, a, tokens)
        p2p = self._pp_p2p(role, a, tokens)
        f_layer = self.op_time(role, "layer_fwd", tokens, context_len) / tp + ar
        b_layer = 0.0
        if backward:
            b_layer = self.op_time(role, "layer_bwd", tokens, context_len) / tp + ar
            if self.config.activation_recompute:
                b_layer += f_layer
        embed = self.op_time(role, "embed_fwd", tokens, 0) / tp
        head = self.op_time(role, "head_fwd", tokens, 0) / tp
        out = []
        for i, (lo, hi) in enumerate(stage_layer_map(spec.num_layers, s.pp)):
            n = hi - lo
            f, b = n * f_layer + p2p, (n * b_layer + p2p) if backward else 0.0
            if i == 0:
                f += embed
                b += 2 * embed if backward else 0.0
            if i == s.pp - 1:
                f += head
                b += 2 * head if backward else 0.0
            out.append((f, b))
        return out

    # -- function calls ------------------------------------------------------
    def call_time(self, node: FunctionCallNode, a: Assignment) -> float:
        key = (node.role, node.call_type, node.workload, a)
        cached = self._call_cache.get(key)
        if cached is None:
            cached = self._call_time(node, a)
            self._call_cache[key] = cached
        return cached

    def _call_time(self, node: FunctionCallNode, a: Assignment) -> float:
        """Compose per-stage times into one call.

        Training and inference run ``mbs`` micro-batches through a ``pp``-stage
        pipeline in ``(mbs + pp - 1)`` bottleneck-stage slots. Training then
        all-reduces gradients over DP and steps the optimizer, once per PPO
        minibatch. Generation is one pipelined prefill over the prompt plus
        ``gen_len`` decode steps of one token per sequence; a decode step
        cycles every micro-batch through every stage, ``max(mbs, pp)`` slots.
        """
        s = a.strategy
        w = node.workload
        role = node.role
        spec = self.models[role]
        slots = s.n_microbatches + s.pp - 1
        if node.call_type == CallType.TRAIN_STEP:
            rows = w.effective_batch / w.ppo_minibatches / (s.dp * s.n_microbatches)
            stages = self.stage_times(role, a, rows * w.seq_len, w.seq_len, backward=True)
            pipe = slots * max(f + b for f, b in stages)
            grad_bytes = max(sum(layer_unit_params(spec)[lo:hi]) for lo, hi in
                             stage_layer_map(spec.num_layers, s.pp)) * spec.grad_bytes / s.tp
            allreduce = comm_time(2 * (s.dp - 1) / s.dp * grad_bytes, self.group_bandwidths(a)[1])
            layers = max(hi - lo for lo, hi in stage_layer_map(spec.num_layers, s.pp))
            opt = layers * self.op_time(role, "layer_opt_step", 1, 0) / s.tp
            if self.config.dp_shard_optimizer:
                opt /= s.dp
            return w.ppo_minibatches * (pipe + allreduce + opt)
        if node.call_type == CallType.INFERENCE:
            rows = w.effective_batch / (s.dp * s.n_microbatches)
            stages = self.stage_times(role, a, rows * w.seq_len, w.seq_len, backward=False)
            return slots * max(f for f, _ in stages)
        rows = w.effective_batch / (s.dp * s.n_microbatches)
        prefill = slots * max(f for f, _ in self.stage_times(role, a, rows * w.prompt_len,
                                                              w.prompt_len, backward=False))
        mean_ctx = w.prompt_len + (w.gen_len + 1) / 2
        step = max(s.n_microbatches, s.pp) * max(
            f for f, _ in self.stage_times(role, a, rows, mean_ctx, backward=False))
        return prefill + w.gen_len * step

    def output_bytes(self, node: FunctionCallNode) -> float:
        """Bytes a call hands to its data consumers."""
        w = node.workload
        if node.call_type == CallType.GENERATION:
            per_token = self.config.gen_output_bytes_per_token
        elif node.call_type == CallType.INFERENCE:
            per_token = self.config.inf_output_bytes_per_token
        else:
            return 0.0
        return float(w.effective_batch * w.seq_len * per_token)

    def param_realloc(self, role: str, src: Assignment, dst: Assignment) -> ReallocPlan:
        key = ("param", role, src, dst)
        if key not in self._transfer_cache:
            self._transfer_cache[key] = plan_param_realloc(self.models[role], src, dst, self.cluster)
        return self._transfer_cache[key]

    def data_transfer(self, producer: FunctionCallNode, src: Assignment, dst: Assignment) -> ReallocPlan:
        nbytes = self.output_bytes(producer)
        key = ("data", nbytes, src, dst)
        if key not in self._transfer_cache:
            self._transfer_cache[key] = plan_data_transfer(src, dst, nbytes, self.cluster)
        return self._transfer_cache[key]

    def offload_time(self, role: str, a: Assignment) -> float:
        """Host<->device copy of the largest per-device parameter shard."""
        return comm_time(max(self.param_shards(role, a).values()), self.cluster.host_to_device_bw)

    # -- memory ------------------------------------------------------------
    def param_shards(self, role: str, a: Assignment) -> Dict[int, float]:
        """Device -> bytes of this model's parameters under placement ``a``."""
        key = ("param", role, a)
        if key not in self._mem_cache:
            self._mem_cache[key] = self._per_device(role, a, self.models[role].param_bytes)
        return self._mem_cache[key]

    def static_shards(self, role: str, a: Assignment) -> Dict[int, float]:
        key = ("static", role, a)
        if key not in self._mem_cache:
            spec = self.models[role]
            out = self._per_device(role, a, spec.grad_bytes + spec.optimizer_bytes_per_param)
            if self.config.dp_shard_optimizer:
                out = {d: v / a.strategy.dp for d, v in out.items()}
            self._mem_cache[key] = out
        return self._mem_cache[key]

    def _per_device(self, role: str, a: Assignment, bytes_per_param: float) -> Dict[int, float]:
        spec = self.models[role]
        units = layer_unit_params(spec)
        stages = stage_layer_map(spec.num_layers, a.strategy.pp)
        stage_params = [sum(units[lo:hi]) for lo, hi in stages]
        return {dev: stage_params[p] * bytes_per_param / a.strategy.tp
                for (p, _, _), dev in rank_layout(a, self.cluster.gpus_per_node).items()}

    def active_memory(self, node: FunctionCallNode, a: Assignment) -> Dict[int, float]:
        key = ("active", node.role, node.call_type, node.workload, a)
        if key not in self._mem_cache:
            self._mem_cache[key] = self._active_memory(node, a)
        return self._mem_cache[key]

    def _active_memory(self, node: FunctionCallNode, a: Assignment) -> Dict[int, float]:
        """Device -> transient bytes while ``node`` runs (parameters excluded).

        Generation: KV cache for the DP shard's sequences on the stage's layers
        plus one micro-batch of next-token logits. Inference: one layer's
        working set and the logits of one micro-batch. Training: activations
        stored for backward for ``min(mbs, pp)`` in-flight micro-batches (no
        recomputation) plus fp32 logits of one micro-batch.
        """
        s = a.strategy
        w = node.workload
        spec = self.models[node.role]
        pb = spec.param_bytes
        stages = stage_layer_map(spec.num_layers, s.pp)
        last = s.pp - 1
        out_dim = spec.output_dim
        per_stage = []
        if node.call_type == CallType.GENERATION:
            rows_dp = w.effective_batch / s.dp
            rows = rows_dp / s.n_microbatches
            for p, (lo, hi) in enumerate(stages):
                kv = 2 * (hi - lo) * spec.kv_dim * rows_dp * w.seq_len * pb / s.tp
                logits = rows * out_dim * pb / s.tp if p == last else 0.0
                per_stage.append(kv + logits)
        elif node.call_type == CallType.INFERENCE:
            tokens = w.effective_batch / (s.dp * s.n_microbatches) * w.seq_len
            work = tokens * (2 * spec.intermediate_size + 4 * spec.hidden_size) * pb / s.tp
            for p in range(s.pp):
                per_stage.append(work + (tokens * out_dim * pb / s.tp if p == last else 0.0))
        else:
            tokens = w.effective_batch / w.ppo_minibatches / (s.dp * s.n_microbatches) * w.seq_len
            full_layer = pb / 2 * (10 * spec.hidden_size + 24 * spec.hidden_size / s.tp)
            stored_layer = spec.hidden_size * pb if self.config.activation_recompute else full_layer
            for p, (lo, hi) in enumerate(stages):
                live = min(s.n_microbatches, s.pp - p)
                acts = tokens * ((hi - lo) * stored_layer * live + full_layer)
                per_stage.append(acts + (tokens * out_dim * 4 / s.tp if p == last else 0.0))
        return {dev: per_stage[p] for (p, _, _), dev in rank_layout(a, self.cluster.gpus_per_node).items()}

    def plan_memory(self, plan: ExecutionPlan, graph: DataflowGraph) -> MemoryReport:
        """Peak bytes per device over all function calls of ``graph``.

        Gradients and optimizer states of trained models stay on their
        training mesh for the whole run. A model's parameters live where its
        most recent call ran, until the model's next call moves them; calls
        flagged for offload park their parameters on the host afterwards.
        """
        n_dev = self.cluster.n_devices
        static = [0.0] * n_dev
        for name, node in graph.calls().items():
            if node.call_type == CallType.TRAIN_STEP:
                for dev, b in self.static_shards(node.role, plan.assignment[name]).items():
                    static[dev] += b
        resident: Dict[str, Dict[int, float]] = {}
        peak = list(static)
        active_at_peak = [0.0] * n_dev
        for nid in graph.topo_order():
            node = graph.node(nid)
            a = plan.assignment[node.name]
            resident[node.role] = self.param_shards(node.role, a)
            act = self.active_memory(node, a)
            # only devices holding something can reach a new peak
            touched = set(act)
            for r in resident.values():
                touched.update(r)
            for dev in touched:
                active = act.get(dev, 0.0)
                for r in resident.values():
                    active += r.get(dev, 0.0)
                if static[dev] + active > peak[dev]:
                    peak[dev] = static[dev] + active
                    active_at_peak[dev] = active
            if plan.offloaded(node.name):
                resident[node.role] = {}
        per_device = dict(enumerate(peak))
        breakdown = {d: MemoryBreakdown(static[d], active_at_peak[d]) for d in range(n_dev)}
        return MemoryReport(per_device, breakdown, max(peak, default=0.0))
