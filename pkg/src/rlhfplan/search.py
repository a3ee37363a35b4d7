"""Execution-plan search: greedy start, Metropolis-Hastings chain, brute force."""

from __future__ import annotations

import csv
import io
import itertools
import math
import random
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from .cost_model import CostModel
from .simulator import SIM_MODES, VERBATIM, simulate, augment
from .strategy import ExecutionPlan, OptionSpace, PruneConfig, build_option_space
from .workflow import DataflowGraph

HISTORY_HEADER = ("proposal", "cost", "best_timecost", "accepted")


class SearchError(RuntimeError):
    pass


@dataclass(frozen=True)
class SearchConfig:
    beta: Optional[float] = None  # None: ln(10) / (0.1 * initial cost)
    alpha: float = 1000.0
    budget_proposals: Optional[int] = 10_000
    budget_seconds: Optional[float] = None
    seed: int = 0
    prune: PruneConfig = field(default_factory=PruneConfig)
    chains: int = 1
    sim_mode: str = VERBATIM

    def __post_init__(self):
        if self.beta is not None and not self.beta > 0:
            raise SearchError("beta must be > 0")
        if self.alpha < 1:
            raise SearchError("alpha must be >= 1")
        if self.budget_proposals is None and self.budget_seconds is None:
            raise SearchError("a proposal or wall-clock budget is required")
        if self.budget_proposals is not None and self.budget_proposals < 1:
            raise SearchError("budget_proposals must be positive")
        if self.budget_seconds is not None and not self.budget_seconds > 0:
            raise SearchError("budget_seconds must be positive")
        if self.chains < 1:
            raise SearchError("chains must be >= 1")
        if self.sim_mode not in SIM_MODES:
            raise SearchError(f"sim_mode must be one of {SIM_MODES}")


@dataclass(frozen=True)
class Evaluation:
    time_cost: float
    max_mem: float
    cost: float
    feasible: bool


def penalized_cost(time_cost: float, max_mem: float, mem_capacity: float, alpha: float) -> float:
    """TimeCost, multiplied by ``alpha`` when the peak memory does not fit."""
    return time_cost if max_mem < mem_capacity else alpha * time_cost


class PlanEvaluator:
    """Scores plans (simulated TimeCost, MaxMem, penalized cost) with memoization."""

    def __init__(self, graph: DataflowGraph, cost: CostModel, alpha: float = 1000.0,
                 sim_mode: str = VERBATIM):
        self.graph = graph
        self.cost = cost
        self.alpha = alpha
        self.sim_mode = sim_mode
        self._memo: Dict[Tuple, Evaluation] = {}

    def evaluate(self, plan: ExecutionPlan, memo: bool = True) -> Evaluation:
        key = plan.key() if memo else None
        if key is not None and key in self._memo:
            return self._memo[key]
        t, _ = simulate(augment(self.graph, plan, self.cost), self.sim_mode)
        mem = self.cost.plan_memory(plan, self.graph).max_mem
        cap = self.cost.cluster.mem_per_device
        ev = Evaluation(t, mem, penalized_cost(t, mem, cap, self.alpha), mem < cap)
        if key is not None:
            self._memo[key] = ev
        return ev


def plan_cost(plan: ExecutionPlan, evaluator: PlanEvaluator) -> float:
    return evaluator.evaluate(plan).cost


def default_space(graph: DataflowGraph, cost: CostModel, prune: Optional[PruneConfig] = None) -> OptionSpace:
    return build_option_space(graph, cost.cluster, cost.models, prune, cost.call_time)


def greedy_init(graph: DataflowGraph, space: OptionSpace, cost: CostModel) -> ExecutionPlan:
    """Each call independently takes its fastest standalone option."""
    calls = graph.calls()
    assignment = {}
    for name in graph.call_names:
        options = space[name]
        if not options:
            raise SearchError(f"{name}: no feasible (mesh, strategy) option for this workload")
        node = calls[name]
        assignment[name] = min(options, key=lambda a: cost.call_time(node, a))
    return ExecutionPlan(assignment)


def default_beta(initial_cost: float) -> float:
    """Inverse temperature at which a 10% cost increase over the start is accepted 1 time in 10."""
    return math.log(10) / (0.1 * initial_cost)


def acceptance_probability(current_cost: float, proposed_cost: float, beta: float) -> float:
    """min(1, exp(-beta * (proposed - current)))."""
    delta = proposed_cost - current_cost
    if delta <= 0:
        return 1.0
    return math.exp(-beta * delta)


@dataclass(frozen=True)
class HistoryRow:
    proposal: int
    cost: float
    best_timecost: float
    accepted: bool


@dataclass
class SearchResult:
    plan: ExecutionPlan
    evaluation: Evaluation
    initial_plan: ExecutionPlan
    initial_evaluation: Evaluation
    history: List[HistoryRow]
    beta: float

    @property
    def improvement_ratio(self) -> float:
        """Best TimeCost found relative to the starting plan's."""
        return self.evaluation.time_cost / self.initial_evaluation.time_cost

    def improvement_series(self) -> List[float]:
        t0 = self.initial_evaluation.time_cost
        return [row.best_timecost / t0 for row in self.history]


def _better(ev: Evaluation, best: Optional[Evaluation]) -> bool:
    """Feasible plans beat infeasible ones; feasible compare by TimeCost, infeasible by cost."""
    if best is None:
        return True
    if ev.feasible != best.feasible:
        return ev.feasible
    return ev.time_cost < best.time_cost if ev.feasible else ev.cost < best.cost


def run_chain(space: OptionSpace, evaluator: PlanEvaluator, initial: ExecutionPlan,
              cfg: SearchConfig, seed: int,
              on_step: Optional[Callable[[int, ExecutionPlan, Evaluation], None]] = None) -> SearchResult:
    """One Metropolis-Hastings chain targeting P(p) ~ exp(-beta * cost(p)).

    Proposals follow :func:`mutate` draw for draw, but the chain state is kept
    as a tuple of option indices so revisiting a plan costs one dict lookup.
    Every evaluated proposal, accepted or not, competes for the returned plan.
    """
    rng = random.Random(seed)
    names = sorted(space)
    options = [space[n] for n in names]
    try:
        state = [options[k].index(initial.assignment[n]) for k, n in enumerate(names)]
    except (KeyError, ValueError):
        raise SearchError("initial plan uses an assignment outside the option space") from None
    offload = dict(initial.offload)
    seen: Dict[Tuple[int, ...], Tuple[ExecutionPlan, Evaluation]] = {}

    def lookup(idx: Tuple[int, ...]) -> Tuple[ExecutionPlan, Evaluation]:
        hit = seen.get(idx)
        if hit is None:
            plan = ExecutionPlan({n: options[k][i] for k, (n, i) in enumerate(zip(names, idx))}, dict(offload))
            hit = seen[idx] = (plan, evaluator.evaluate(plan))
        return hit

    current, cur = lookup(tuple(state))
    beta = cfg.beta if cfg.beta is not None else default_beta(cur.cost)
    best_plan, best = current, cur
    history: List[HistoryRow] = []
    deadline = time.monotonic() + cfg.budget_seconds if cfg.budget_seconds is not None else None
    for i in itertools.count(1):
        if cfg.budget_proposals is not None and i > cfg.budget_proposals:
            break
        if deadline is not None and time.monotonic() >= deadline:
            break
        k = rng.randrange(len(names))
        n_opts = len(options[k])
        proposal = list(state)
        if n_opts >= 2:
            pick = rng.randrange(n_opts - 1)
            proposal[k] = pick + 1 if pick >= state[k] else pick
        cand, ev = lookup(tuple(proposal))
        p = acceptance_probability(cur.cost, ev.cost, beta)
        accepted = p >= 1.0 or rng.random() < p
        if accepted:
            state, current, cur = proposal, cand, ev
        if _better(ev, best):
            best_plan, best = cand, ev
        history.append(HistoryRow(i, ev.cost, best.time_cost if best.feasible else math.inf, accepted))
        if on_step is not None:
            on_step(i, current, cur)
    return SearchResult(best_plan, best, initial, evaluator.evaluate(initial), history, beta)


def _chain_worker(args):
    space, evaluator, initial, cfg, seed = args
    return run_chain(space, evaluator, initial, cfg, seed)


def mh_search(graph: DataflowGraph, cost: CostModel, cfg: SearchConfig,
              space: Optional[OptionSpace] = None) -> SearchResult:
    """Greedy initialization followed by ``cfg.chains`` independent chains.

    Chains use seeds ``seed, seed + 1, ...`` and run in worker processes when
    there is more than one; the best plan over all chains is returned and the
    histories are concatenated in chain order.
    """
    if space is None:
        space = default_space(graph, cost, cfg.prune)
    initial = greedy_init(graph, space, cost)
    evaluator = PlanEvaluator(graph, cost, cfg.alpha, cfg.sim_mode)
    if cfg.chains == 1:
        return run_chain(space, evaluator, initial, cfg, cfg.seed)
    jobs = [(space, evaluator, initial, cfg, cfg.seed + k) for k in range(cfg.chains)]
    with ProcessPoolExecutor(max_workers=cfg.chains) as pool:
        results = list(pool.map(_chain_worker, jobs))
    best = results[0]
    for r in results[1:]:
        if _better(r.evaluation, best.evaluation):
            best = r
    history, offset, running = [], 0, math.inf
    for r in results:
        for row in r.history:
            running = min(running, row.best_timecost)
            history.append(HistoryRow(offset + row.proposal, row.cost, running, row.accepted))
        offset += len(r.history)
    return SearchResult(best.plan, best.evaluation, initial, results[0].initial_evaluation, history, best.beta)


def space_size(space: OptionSpace) -> int:
    return math.prod(len(v) for v in space.values())


@dataclass
class BruteForceResult:
    plan: ExecutionPlan
    evaluation: Evaluation
    n_evaluated: int


def brute_force(graph: DataflowGraph, cost: CostModel, space: OptionSpace, limit: int = 10**6,
                alpha: float = 1000.0, sim_mode: str = VERBATIM) -> BruteForceResult:
    """Exhaustive search; the first minimum in enumeration order wins ties."""
    size = space_size(space)
    if size > limit:
        raise SearchError(f"search space has {size} plans, above the brute-force limit of {limit}")
    evaluator = PlanEvaluator(graph, cost, alpha, sim_mode)
    names = graph.call_names
    best_plan, best = None, None
    for combo in itertools.product(*(space[n] for n in names)):
        plan = ExecutionPlan(dict(zip(names, combo)))
        ev = evaluator.evaluate(plan, memo=False)
        if _better(ev, best):
            best_plan, best = plan, ev
    return BruteForceResult(best_plan, best, size)


def history_csv(history: Sequence[HistoryRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_HEADER)
    for row in history:
        w.writerow([row.proposal, repr(row.cost), repr(row.best_timecost), int(row.accepted)])
    return buf.getvalue()


def read_history_csv(text: str) -> List[HistoryRow]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != HISTORY_HEADER:
        raise SearchError(f"unexpected history header {reader.fieldnames}")
    return [HistoryRow(int(r["proposal"]), float(r["cost"]), float(r["best_timecost"]), r["accepted"] == "1")
            for r in reader]
