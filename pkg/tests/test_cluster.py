import itertools
import math

import pytest
from hypothesis import given, strategies as st

from rlhfplan.cluster import (ClusterError, ClusterSpec, DeviceMesh, enumerate_meshes, format_mesh,
                              link_bandwidth, mesh_violations, overlap, parse_mesh)


def meshes_by_definition(n_nodes, m):
    """Every rectangle of the cluster that is either whole contiguous hosts or an
    aligned single-host slice whose size divides the host width."""
    out = set()
    for no, nc, go, gc in itertools.product(range(n_nodes), range(1, n_nodes + 1), range(m), range(1, m + 1)):
        if no + nc > n_nodes or go + gc > m:
            continue
        whole = gc == m and go == 0
        slice_ = nc == 1 and gc < m and m % gc == 0 and go % gc == 0
        if whole or slice_:
            out.add(DeviceMesh(no, nc, go, gc))
    return out


@pytest.mark.parametrize("n,m,expected", [(1, 8, 15), (8, 8, 148), (2, 8, 31), (1, 1, 1), (4, 6, 10 + 4 * 11)])
def test_mesh_counts(n, m, expected):
    meshes = enumerate_meshes(ClusterSpec(n, m))
    assert len(meshes) == expected
    assert set(meshes) == meshes_by_definition(n, m)
    assert len(set(meshes)) == len(meshes)


def test_mesh_order_is_by_size_then_position():
    meshes = enumerate_meshes(ClusterSpec(2, 4))
    keys = [(x.size, x.node_offset, x.gpu_offset) for x in meshes]
    assert keys == sorted(keys)


@given(st.integers(1, 4), st.sampled_from([1, 2, 4, 6, 8]), st.data())
def test_overlap_equals_shared_devices(n, m, data):
    cluster = ClusterSpec(n, m)
    meshes = enumerate_meshes(cluster)
    a = data.draw(st.sampled_from(meshes))
    b = data.draw(st.sampled_from(meshes))
    assert overlap(a, b) == bool(a.device_set(m) & b.device_set(m))


@given(st.integers(1, 20), st.sampled_from([1, 2, 4, 8]), st.data())
def test_format_parse_round_trip(n, m, data):
    cluster = ClusterSpec(n, m)
    mesh = data.draw(st.sampled_from(enumerate_meshes(cluster)))
    assert parse_mesh(format_mesh(mesh, cluster), cluster) == mesh


def test_format_examples():
    c = ClusterSpec(16, 8)
    assert format_mesh(c.full_mesh(), c) == "trainer[01-16]"
    assert format_mesh(DeviceMesh(2, 1, 0, 8), c) == "trainer03"
    assert format_mesh(DeviceMesh(2, 1, 4, 4), c) == "trainer03:gpu[4-7]"
    assert format_mesh(DeviceMesh(2, 1, 5, 1), c) == "trainer03:gpu5"
    assert parse_mesh("trainer01:gpu[0-3]", c) == DeviceMesh(0, 1, 0, 4)


@pytest.mark.parametrize("text", ["trainer[01-17]", "trainer01:gpu[1-2]", "trainer[01-02]:gpu[0-3]",
                                  "trainer01:gpu[0-2]", "nonsense", "trainer00", "trainer[03-02]"])
def test_parse_rejects_invalid(text):
    with pytest.raises(ClusterError):
        parse_mesh(text, ClusterSpec(16, 8))


def test_violations_listed():
    c = ClusterSpec(2, 8)
    assert mesh_violations(DeviceMesh(0, 2, 0, 8), c) == []
    assert mesh_violations(DeviceMesh(0, 3, 0, 8), c)
    assert mesh_violations(DeviceMesh(0, 1, 2, 4), c)
    assert mesh_violations(DeviceMesh(0, 1, 0, 3), c)
    assert mesh_violations(DeviceMesh(0, 0, 0, 8), c)


def test_devices_host_major():
    assert DeviceMesh(1, 2, 0, 4).devices(4) == [4, 5, 6, 7, 8, 9, 10, 11]
    assert DeviceMesh(0, 1, 2, 2).devices(8) == [2, 3]


def test_link_bandwidth():
    c = ClusterSpec(2, 4, intra_node_bw=100.0, inter_node_bw=10.0)
    assert link_bandwidth(c, 1, 1) == math.inf
    assert link_bandwidth(c, 0, 3) == 100.0
    assert link_bandwidth(c, 3, 4) == 10.0
    with pytest.raises(ClusterError):
        c.node_of(8)


def test_cluster_validation_and_round_trip():
    with pytest.raises(ClusterError):
        ClusterSpec(0, 8)
    with pytest.raises(ClusterError):
        ClusterSpec(1, 8, inter_node_bw=0)
    c = ClusterSpec(3, 4, mem_per_device=40e9)
    assert ClusterSpec.from_dict(c.to_dict()) == c
    assert c.n_devices == 12
