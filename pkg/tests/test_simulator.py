import json
import random

import pytest

from reference_plans import PLAN_7B_7B, plan_document
from conftest import TINY_WORKLOAD, llama7b_models, synthetic_tables, tiny_models
from sim_oracle import device_busy_makespan, overlapping_intervals, random_augmented_graph
from rlhfplan.cluster import ClusterSpec, DeviceMesh
from rlhfplan.cost_model import CostModel
from rlhfplan.simulator import (CALL, CORRECTED, DATA_TRANSFER, OFFLOAD, ONLOAD, PARAM_REALLOC, VERBATIM,
                                AugmentedGraph, SimulationError, augment, model_predecessors, simulate,
                                time_cost)
from rlhfplan.strategy import Assignment, ExecutionPlan, ParallelStrategy
from rlhfplan.workflow import EdgeKind, WorkloadSpec, build_ppo, build_workflow


def test_corrected_mode_matches_device_busy_oracle():
    rng = random.Random(7)
    for _ in range(300):
        aug = random_augmented_graph(rng)
        t, trace = simulate(aug, CORRECTED)
        expected, intervals = device_busy_makespan(aug)
        assert t == expected
        assert {e.node_id: (e.start, e.end) for e in trace.events} == intervals
        assert overlapping_intervals([e for e in trace.events if e.end > e.start]) == []


def stale_last_example():
    # mesh B = {0}, C = {1}, A = {0, 1}
    aug = AugmentedGraph()
    aug.add_node("b", CALL, {0}, 10.0)
    aug.add_node("c", CALL, {1}, 20.0)
    aug.add_node("a", CALL, {0, 1}, 1.0)
    return aug


def test_verbatim_mode_can_leave_stale_last():
    aug = stale_last_example()
    tv, trace_v = simulate(aug, VERBATIM)
    tc, trace_c = simulate(aug, CORRECTED)
    # c ran on {1} until 20, but A's record was 10 > c's old D.last of 0, so it was not refreshed
    assert trace_v.by_id()[2].start == 10.0 and tv == 20.0
    assert trace_c.by_id()[2].start == 20.0 and tc == 21.0
    assert overlapping_intervals(trace_v.events) == [(1, 2)]
    assert overlapping_intervals(trace_c.events) == []


def test_modes_agree_on_nested_meshes_sequence():
    aug = AugmentedGraph()
    aug.add_node("x", CALL, {0, 1}, 3.0)
    aug.add_node("y", CALL, {0}, 2.0)
    aug.add_node("z", CALL, {0, 1}, 1.0)
    aug.add_edge(0, 1)
    assert simulate(aug, VERBATIM)[0] == simulate(aug, CORRECTED)[0] == 6.0


def test_ready_order_and_disjoint_parallelism():
    aug = AugmentedGraph()
    aug.add_node("p", CALL, {0}, 4.0)
    aug.add_node("q", CALL, {1}, 5.0)
    aug.add_node("r", CALL, {0, 1}, 1.0)
    aug.add_edge(0, 2)
    t, trace = simulate(aug, CORRECTED)
    assert t == 6.0
    assert trace.by_id()[2].start == 5.0


def test_empty_device_nodes_start_at_ready_time():
    aug = AugmentedGraph()
    aug.add_node("p", CALL, {0}, 4.0)
    aug.add_node("free", DATA_TRANSFER, frozenset(), 1.5)
    aug.add_edge(0, 1)
    assert simulate(aug)[0] == 5.5


def test_bad_inputs():
    aug = AugmentedGraph()
    aug.add_node("p", CALL, {0}, 1.0)
    aug.add_node("q", CALL, {0}, 1.0)
    aug.add_edge(0, 1)
    aug.add_edge(1, 0)
    with pytest.raises(SimulationError):
        simulate(aug)
    with pytest.raises(SimulationError):
        simulate(AugmentedGraph(), "sloppy")
    with pytest.raises(SimulationError):
        AugmentedGraph().add_node("neg", CALL, {0}, -1.0)
    with pytest.raises(SimulationError):
        AugmentedGraph().add_node("gap", CALL, {0}, 1.0, node_id=3)
    assert simulate(AugmentedGraph())[0] == 0.0


# -- augmentation ------------------------------------------------------------
def uniform_plan(graph, mesh, strategy, **offload):
    a = Assignment(mesh, strategy)
    return ExecutionPlan({n: a for n in graph.call_names}, dict(offload))


@pytest.fixture
def tiny_cost():
    cluster = ClusterSpec(1, 8)
    models = tiny_models()
    return cluster, CostModel(cluster, models, synthetic_tables(models))


def test_colocated_plan_needs_no_inserted_nodes(tiny_cost):
    cluster, cm = tiny_cost
    graph = build_ppo(3, TINY_WORKLOAD)
    plan = uniform_plan(graph, cluster.full_mesh(), ParallelStrategy(2, 2, 2, 2))
    aug = augment(graph, plan, cm)
    assert aug.inserted() == []
    # every call shares the one mesh, so they run back to back
    total = sum(cm.call_time(n, plan.assignment[n.name]) for n in graph.nodes)
    assert simulate(aug, CORRECTED)[0] == pytest.approx(total)


def test_transfer_and_realloc_nodes(tiny_cost):
    cluster, cm = tiny_cost
    graph = build_ppo(2, TINY_WORKLOAD)
    left, right = DeviceMesh(0, 1, 0, 4), DeviceMesh(0, 1, 4, 4)
    s = ParallelStrategy(4, 1, 1, 1)
    plan = uniform_plan(graph, left, s)
    plan = plan.with_assignment("ActorTrain", Assignment(right, s))
    aug = augment(graph, plan, cm)
    data = [e for e in graph.edges if e.kind == EdgeKind.DATA
            and (graph.node(e.src).name == "ActorTrain") != (graph.node(e.dst).name == "ActorTrain")]
    assert len(aug.inserted(DATA_TRANSFER)) == len(data) == 2 * 4
    realloc = sorted(n.name for n in aug.inserted(PARAM_REALLOC))
    assert realloc == sorted(["realloc ActorGen@0->ActorTrain@0", "realloc ActorTrain@0->ActorGen@1",
                              "realloc ActorGen@1->ActorTrain@1"])
    for n in aug.inserted():
        assert n.devices == left.device_set(8) | right.device_set(8)
    t, trace = simulate(aug, CORRECTED)
    assert t > 0
    assert overlapping_intervals([e for e in trace.events if e.end > e.start]) == []


def test_offload_inserts_offload_and_onload(tiny_cost):
    cluster, cm = tiny_cost
    graph = build_ppo(2, TINY_WORKLOAD)
    plan = uniform_plan(graph, cluster.full_mesh(), ParallelStrategy(8, 1, 1, 1), RefInf=True)
    aug = augment(graph, plan, cm)
    assert [n.name for n in aug.inserted(OFFLOAD)] == ["offload RefInf@0", "offload RefInf@1"]
    assert [n.name for n in aug.inserted(ONLOAD)] == ["onload RefInf@1"]
    assert aug.inserted(PARAM_REALLOC) == []


def test_model_predecessors_are_latest_same_model_calls():
    graph = build_ppo(2, WorkloadSpec())
    ids = {n.label: n.id for n in graph.nodes}
    pred = model_predecessors(graph)
    assert pred[ids["ActorGen@0"]] == []
    assert pred[ids["ActorTrain@0"]] == [ids["ActorGen@0"]]
    assert pred[ids["ActorGen@1"]] == [ids["ActorTrain@0"]]
    assert pred[ids["RefInf@1"]] == [ids["RefInf@0"]]
    assert pred[ids["CriticTrain@1"]] == [ids["CriticInf@1"]]


def test_reference_7b_plan_simulates_and_trace_is_clean():
    cluster = ClusterSpec(2, 8)
    graph = build_ppo(2, WorkloadSpec())
    cm = CostModel(cluster, llama7b_models())
    plan = ExecutionPlan.from_dict(plan_document(PLAN_7B_7B), cluster)
    t, trace, aug = time_cost(graph, plan, cm, CORRECTED)
    assert t > 0
    assert len(trace.events) == len(aug.nodes)
    assert overlapping_intervals([e for e in trace.events if e.end > e.start]) == []
    doc = json.loads(trace.to_chrome_json(cluster.gpus_per_node))
    xs = [e for e in doc["traceEvents"] if e["ph"] == "X"]
    assert len(xs) == sum(len(e.devices) for e in trace.events)
    assert {e["pid"] for e in xs} == {0, 1}
    # calls on the two halves of the cluster overlap in time
    ev = {e.name: e for e in trace.events}
    a, c = ev["ActorTrain@0"], ev["CriticTrain@0"]
    assert a.start < c.end and c.start < a.end


def test_variant_workflows_simulate(tiny_cost):
    cluster, cm = tiny_cost
    for kind in ("dpo", "remax", "grpo"):
        graph = build_workflow(kind, 2, TINY_WORKLOAD)
        plan = uniform_plan(graph, DeviceMesh(0, 1, 0, 4), ParallelStrategy(4, 1, 1, 1))
        plan = plan.with_assignment("ActorTrain", Assignment(DeviceMesh(0, 1, 4, 4), ParallelStrategy(2, 2, 1, 1)))
        t, _, aug = time_cost(graph, plan, cm)
        assert t > 0
        # DPO's actor only trains, so its parameters never leave the training mesh
        assert bool(aug.inserted(PARAM_REALLOC)) == (kind != "dpo")
