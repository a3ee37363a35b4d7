import math
from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from tiny_instances import tiny_instance
from rlhfplan.cluster import DeviceMesh
from rlhfplan.search import (Evaluation, PlanEvaluator, SearchConfig, SearchError, acceptance_probability,
                             brute_force, default_beta, greedy_init, history_csv, mh_search, penalized_cost,
                             read_history_csv, run_chain, space_size)
from rlhfplan.strategy import Assignment, ExecutionPlan, ParallelStrategy


class TableEvaluator:
    """Fixed cost per option of a single call."""

    def __init__(self, costs):
        self.costs = costs

    def evaluate(self, plan, memo=True):
        c = self.costs[plan.assignment["X"].strategy.n_microbatches]
        return Evaluation(c, 0.0, c, True)


def toy_chain(costs, beta, steps, seed):
    opts = [Assignment(DeviceMesh(0, 1, 0, 1), ParallelStrategy(1, 1, 1, mbs)) for mbs in sorted(costs)]
    visits = Counter()
    run_chain({"X": opts}, TableEvaluator(costs), ExecutionPlan({"X": opts[0]}),
              SearchConfig(beta=beta, budget_proposals=steps), seed,
              on_step=lambda i, plan, ev: visits.update([plan.assignment["X"].strategy.n_microbatches]))
    return visits


def test_chain_samples_boltzmann_distribution():
    costs = {1: 1.0, 2: 1.5, 4: 2.5}
    visits = toy_chain(costs, 1.0, 200_000, seed=4)
    z = sum(math.exp(-c) for c in costs.values())
    for k, c in costs.items():
        assert abs(visits[k] / 200_000 - math.exp(-c) / z) < 0.02


def test_acceptance_probability():
    assert acceptance_probability(10.0, 9.0, 1.0) == 1.0
    assert acceptance_probability(10.0, 10.0, 1.0) == 1.0
    assert acceptance_probability(10.0, 12.0, 0.5) == pytest.approx(math.exp(-1.0))
    # at the default temperature a 10% regression is accepted one time in ten
    assert acceptance_probability(50.0, 55.0, default_beta(50.0)) == pytest.approx(0.1)


def test_penalized_cost():
    assert penalized_cost(3.0, 10.0, 80.0, 1000.0) == 3.0
    assert penalized_cost(3.0, 80.0, 80.0, 1000.0) == 3000.0


def test_greedy_init_takes_fastest_option_per_call():
    graph, cost, space = tiny_instance(1)
    plan = greedy_init(graph, space, cost)
    calls = graph.calls()
    for name in graph.call_names:
        fastest = min(cost.call_time(calls[name], a) for a in space[name])
        assert cost.call_time(calls[name], plan.assignment[name]) == fastest


@pytest.mark.parametrize("seed", [10, 11])
def test_search_finds_brute_force_optimum_on_small_space(seed):
    graph, cost, space = tiny_instance(seed, options_per_call=4)
    bf = brute_force(graph, cost, space)
    assert bf.n_evaluated == space_size(space) == 4 ** 6
    res = mh_search(graph, cost, SearchConfig(budget_proposals=50_000, seed=seed), space)
    assert res.evaluation.feasible == bf.evaluation.feasible
    assert res.evaluation.time_cost == pytest.approx(bf.evaluation.time_cost, rel=1e-12)


def test_brute_force_limit():
    graph, cost, space = tiny_instance(0)
    with pytest.raises(SearchError):
        brute_force(graph, cost, space, limit=100)


@given(st.integers(0, 50))
@settings(max_examples=8, deadline=None)
def test_history_best_is_nonincreasing(seed):
    graph, cost, space = tiny_instance(seed % 5, options_per_call=5)
    res = mh_search(graph, cost, SearchConfig(budget_proposals=500, seed=seed), space)
    best = [row.best_timecost for row in res.history]
    assert all(b <= a for a, b in zip(best, best[1:]))
    assert [row.proposal for row in res.history] == list(range(1, 501))
    series = res.improvement_series()
    assert all(b <= a for a, b in zip(series, series[1:]))
    if res.evaluation.feasible:
        assert best[-1] == res.evaluation.time_cost


def test_history_csv_round_trip():
    graph, cost, space = tiny_instance(2)
    res = mh_search(graph, cost, SearchConfig(budget_proposals=300, seed=1), space)
    text = history_csv(res.history)
    assert text.splitlines()[0] == "proposal,cost,best_timecost,accepted"
    assert read_history_csv(text) == res.history
    assert history_csv(read_history_csv(text)) == text
    with pytest.raises(SearchError):
        read_history_csv("a,b\n1,2\n")


def test_same_seed_same_result_and_different_seeds_explore_differently():
    graph, cost, space = tiny_instance(3)
    a = mh_search(graph, cost, SearchConfig(budget_proposals=2000, seed=5), space)
    b = mh_search(graph, cost, SearchConfig(budget_proposals=2000, seed=5), space)
    c = mh_search(graph, cost, SearchConfig(budget_proposals=2000, seed=6), space)
    assert history_csv(a.history) == history_csv(b.history)
    assert a.plan.key() == b.plan.key()
    assert history_csv(a.history) != history_csv(c.history)


def test_parallel_chains():
    graph, cost, space = tiny_instance(4)
    single = [mh_search(graph, cost, SearchConfig(budget_proposals=400, seed=s), space) for s in (7, 8)]
    multi = mh_search(graph, cost, SearchConfig(budget_proposals=400, seed=7, chains=2), space)
    assert len(multi.history) == 800
    assert multi.evaluation.time_cost == min(r.evaluation.time_cost for r in single)
    best = [row.best_timecost for row in multi.history]
    assert all(b <= a for a, b in zip(best, best[1:]))


def test_wall_clock_budget():
    graph, cost, space = tiny_instance(0)
    res = mh_search(graph, cost, SearchConfig(budget_proposals=None, budget_seconds=0.2), space)
    assert len(res.history) > 0


def test_initial_plan_must_come_from_space():
    graph, cost, space = tiny_instance(0)
    plan = greedy_init(graph, space, cost)
    other = {k: v[1:] if v[0] == plan.assignment[k] else v for k, v in space.items()}
    other = {k: [a for a in v if a != plan.assignment[k]] for k, v in other.items()}
    with pytest.raises(SearchError):
        run_chain(other, PlanEvaluator(graph, cost), plan, SearchConfig(budget_proposals=1), 0)


def test_infeasible_plans_are_penalized():
    graph, cost, space = tiny_instance(2)
    ev = PlanEvaluator(graph, cost, alpha=1000.0)
    e = ev.evaluate(greedy_init(graph, space, cost))
    assert e.feasible == (e.max_mem < cost.cluster.mem_per_device)
    assert e.cost == (e.time_cost if e.feasible else 1000.0 * e.time_cost)


@pytest.mark.parametrize("bad", [dict(beta=0), dict(alpha=0.5), dict(budget_proposals=0),
                                 dict(budget_proposals=None), dict(budget_seconds=-1.0), dict(chains=0),
                                 dict(sim_mode="fast")])
def test_search_config_validation(bad):
    with pytest.raises(SearchError):
        SearchConfig(**bad)
