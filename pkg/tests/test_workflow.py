import networkx as nx
import pytest
from hypothesis import given, settings, strategies as st

from rlhfplan.workflow import (CallType, DataflowGraph, DependencyEdge, EdgeKind, FunctionCallNode, WorkflowError,
                               WorkloadSpec, build_ppo, build_workflow, validate)

W = WorkloadSpec()


def to_nx(graph):
    g = nx.DiGraph()
    g.add_nodes_from(n.id for n in graph.nodes)
    g.add_edges_from((e.src, e.dst) for e in graph.edges)
    return g


def test_ppo_single_iteration_shape():
    g = build_ppo(1, W)
    assert g.call_names == ["ActorGen", "RewInf", "RefInf", "CriticInf", "ActorTrain", "CriticTrain"]
    assert len(g.nodes) == 6
    assert len(g.edges) == 11
    assert all(e.kind == EdgeKind.DATA for e in g.edges)
    assert g.roles == ["actor", "critic", "reference", "reward"]
    assert g.trained_roles() == {"actor", "critic"}


@pytest.mark.parametrize("T", [1, 2, 3, 5])
def test_ppo_parameter_version_edges(T):
    g = build_ppo(T, W)
    pv = [e for e in g.edges if e.kind == EdgeKind.PARAMETER_VERSION]
    # actor train feeds ActorGen; critic train feeds CriticInf
    assert len(pv) == 2 * (T - 1)
    labels = sorted((g.node(e.src).label, g.node(e.dst).label) for e in pv)
    expected = sorted([(f"ActorTrain@{t}", f"ActorGen@{t + 1}") for t in range(T - 1)]
                      + [(f"CriticTrain@{t}", f"CriticInf@{t + 1}") for t in range(T - 1)])
    assert labels == expected
    assert validate(g) == []


@pytest.mark.parametrize("kind,per_iter", [("ppo", 6), ("dpo", 2), ("remax", 5), ("grpo", 4)])
def test_variants_are_dags_with_expected_sizes(kind, per_iter):
    g = build_workflow(kind, 3, W)
    assert len(g.nodes) == 3 * per_iter
    assert nx.is_directed_acyclic_graph(to_nx(g))
    assert validate(g) == []


def test_remax_has_two_independent_generations():
    g = build_workflow("remax", 1, W)
    ids = {n.name: n.id for n in g.nodes}
    assert g.node(ids["ActorGen"]).call_type == g.node(ids["ActorGenGreedy"]).call_type == CallType.GENERATION
    assert ids["ActorGen"] not in g.ancestors(ids["ActorGenGreedy"])
    assert ids["ActorGenGreedy"] not in g.ancestors(ids["ActorGen"])


def test_group_size_only_applies_to_grpo():
    w = WorkloadSpec(batch_size=64, group_size=4, ppo_minibatches=4)
    assert all(n.workload.effective_batch == 256 for n in build_workflow("grpo", 1, w).nodes)
    assert all(n.workload.effective_batch == 64 for n in build_workflow("ppo", 1, w).nodes)
    assert all(n.workload.effective_batch == 64 for n in build_workflow("remax", 1, w).nodes)


@given(st.sampled_from(["ppo", "dpo", "remax", "grpo"]), st.integers(1, 6))
@settings(max_examples=40, deadline=None)
def test_topo_order_and_ancestors_agree_with_networkx(kind, T):
    g = build_workflow(kind, T, W)
    G = to_nx(g)
    order = g.topo_order()
    pos = {v: i for i, v in enumerate(order)}
    assert sorted(order) == sorted(G.nodes)
    assert all(pos[u] < pos[v] for u, v in G.edges)
    assert order == list(nx.lexicographical_topological_sort(G))
    for n in g.nodes:
        assert g.ancestors(n.id) == nx.ancestors(G, n.id)


def test_json_round_trip():
    g = build_workflow("remax", 2, W)
    h = DataflowGraph.from_json(g.to_json())
    assert h.nodes == g.nodes
    assert h.edges == g.edges
    assert h.iterations == g.iterations
    assert h.to_json() == g.to_json()


def test_validate_reports_problems():
    g = build_ppo(2, W)
    bad = DataflowGraph(g.nodes, [e for e in g.edges if e.kind == EdgeKind.DATA], 2)
    kinds = {v.kind for v in validate(bad)}
    assert kinds == {"missing_parameter_chain"}

    n = g.nodes
    cyc = DataflowGraph(n[:2], [DependencyEdge(0, 1), DependencyEdge(1, 0)], 1)
    assert "cycle" in {v.kind for v in validate(cyc)}
    with pytest.raises(WorkflowError):
        cyc.topo_order()

    odd = DataflowGraph([n[0], n[0], FunctionCallNode(7, "X", "judge", CallType.INFERENCE, -1, W)],
                        [DependencyEdge(0, 0), DependencyEdge(0, 99)], 1)
    kinds = {v.kind for v in validate(odd)}
    assert {"duplicate_id", "bad_role", "bad_iteration", "self_loop", "dangling_edge"} <= kinds


def test_workload_validation():
    with pytest.raises(WorkflowError):
        WorkloadSpec(batch_size=0)
    with pytest.raises(WorkflowError):
        WorkloadSpec(batch_size=10, ppo_minibatches=4)
    with pytest.raises(WorkflowError):
        build_ppo(0, W)
    with pytest.raises(WorkflowError):
        build_workflow("rloo", 1, W)
    assert WorkloadSpec().seq_len == 2048


def test_malformed_graph_document():
    with pytest.raises(WorkflowError):
        DataflowGraph.from_dict({"nodes": [{"id": 0}], "edges": []})
