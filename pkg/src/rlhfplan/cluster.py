"""Cluster description, device meshes and link bandwidths."""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass
from typing import Any, Dict, FrozenSet, List

HOST_PREFIX = "trainer"

# Bandwidth returned for a device talking to itself; transfers cost nothing.
LOCAL_BANDWIDTH = math.inf


class ClusterError(ValueError):
    pass


@dataclass(frozen=True)
class ClusterSpec:
    n_nodes: int
    gpus_per_node: int
    mem_per_device: float = 80 * 2**30
    intra_node_bw: float = 200e9
    inter_node_bw: float = 25e9
    host_to_device_bw: float = 25e9

    def __post_init__(self):
        if self.n_nodes < 1 or self.gpus_per_node < 1:
            raise ClusterError("n_nodes and gpus_per_node must be >= 1")
        for name in ("mem_per_device", "intra_node_bw", "inter_node_bw", "host_to_device_bw"):
            if not getattr(self, name) > 0:
                raise ClusterError(f"{name} must be > 0")

    @property
    def n_devices(self) -> int:
        return self.n_nodes * self.gpus_per_node

    def node_of(self, device: int) -> int:
        if not 0 <= device < self.n_devices:
            raise ClusterError(f"device index {device} out of range [0, {self.n_devices})")
        return device // self.gpus_per_node

    def full_mesh(self) -> "DeviceMesh":
        return DeviceMesh(0, self.n_nodes, 0, self.gpus_per_node)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ClusterSpec":
        return cls(**data)


@dataclass(frozen=True, order=True)
class DeviceMesh:
    """A rectangle of GPUs: ``node_count`` hosts by ``gpu_count`` GPUs per host.

    Valid meshes either cover whole hosts or an aligned slice of a single host
    whose size divides the per-host GPU count.
    """

    node_offset: int
    node_count: int
    gpu_offset: int
    gpu_count: int

    @property
    def size(self) -> int:
        return self.node_count * self.gpu_count

    def devices(self, gpus_per_node: int) -> List[int]:
        """Global device indices, host-major."""
        return [n * gpus_per_node + g
                for n in range(self.node_offset, self.node_offset + self.node_count)
                for g in range(self.gpu_offset, self.gpu_offset + self.gpu_count)]

    def device_set(self, gpus_per_node: int) -> FrozenSet[int]:
        return frozenset(self.devices(gpus_per_node))

    def is_valid_in(self, cluster: ClusterSpec) -> bool:
        return not mesh_violations(self, cluster)

    def name(self, cluster: ClusterSpec) -> str:
        return format_mesh(self, cluster)


def mesh_violations(mesh: DeviceMesh, cluster: ClusterSpec) -> List[str]:
    M = cluster.gpus_per_node
    problems = []
    if mesh.node_count < 1 or mesh.gpu_count < 1:
        problems.append("mesh must contain at least one device")
        return problems
    if mesh.node_offset < 0 or mesh.node_offset + mesh.node_count > cluster.n_nodes:
        problems.append(f"nodes [{mesh.node_offset}, {mesh.node_offset + mesh.node_count}) "
                        f"outside cluster of {cluster.n_nodes} nodes")
    if mesh.gpu_offset < 0 or mesh.gpu_offset + mesh.gpu_count > M:
        problems.append(f"gpus [{mesh.gpu_offset}, {mesh.gpu_offset + mesh.gpu_count}) "
                        f"outside host of {M} gpus")
    if mesh.gpu_count == M:
        if mesh.gpu_offset != 0:
            problems.append("whole-host mesh must start at gpu 0")
    else:
        if mesh.node_count != 1:
            problems.append("sub-host mesh must span exactly one node")
        if M % mesh.gpu_count:
            problems.append(f"sub-host mesh size {mesh.gpu_count} does not divide {M}")
        elif mesh.gpu_offset % mesh.gpu_count:
            problems.append(f"sub-host mesh offset {mesh.gpu_offset} not aligned to {mesh.gpu_count}")
    return problems


def enumerate_meshes(cluster: ClusterSpec) -> List[DeviceMesh]:
    """All valid meshes, ordered by size then position."""
    N, M = cluster.n_nodes, cluster.gpus_per_node
    meshes = []
    for g in range(1, M):
        if M % g:
            continue
        for node in range(N):
            for off in range(0, M, g):
                meshes.append(DeviceMesh(node, 1, off, g))
    for k in range(1, N + 1):
        for node in range(N - k + 1):
            meshes.append(DeviceMesh(node, k, 0, M))
    meshes.sort(key=lambda m: (m.size, m.node_offset, m.gpu_offset))
    return meshes


def overlap(a: DeviceMesh, b: DeviceMesh) -> bool:
    nodes = a.node_offset < b.node_offset + b.node_count and b.node_offset < a.node_offset + a.node_count
    gpus = a.gpu_offset < b.gpu_offset + b.gpu_count and b.gpu_offset < a.gpu_offset + a.gpu_count
    return nodes and gpus


def link_bandwidth(cluster: ClusterSpec, device_a: int, device_b: int) -> float:
    node_a, node_b = cluster.node_of(device_a), cluster.node_of(device_b)
    if device_a == device_b:
        return LOCAL_BANDWIDTH
    if node_a == node_b:
        return cluster.intra_node_bw
    return cluster.inter_node_bw


def _host(i: int, width: int) -> str:
    return f"{i + 1:0{width}d}"


def format_mesh(mesh: DeviceMesh, cluster: ClusterSpec) -> str:
    """Render as ``trainer[01-16]``, ``trainer03`` or ``trainer03:gpu[0-3]``."""
    width = max(2, len(str(cluster.n_nodes)))
    if mesh.node_count == 1:
        hosts = HOST_PREFIX + _host(mesh.node_offset, width)
    else:
        hosts = (f"{HOST_PREFIX}[{_host(mesh.node_offset, width)}-"
                 f"{_host(mesh.node_offset + mesh.node_count - 1, width)}]")
    if mesh.gpu_count == cluster.gpus_per_node:
        return hosts
    if mesh.gpu_count == 1:
        return f"{hosts}:gpu{mesh.gpu_offset}"
    return f"{hosts}:gpu[{mesh.gpu_offset}-{mesh.gpu_offset + mesh.gpu_count - 1}]"


_MESH_RE = re.compile(
    r"^(?P<prefix>[A-Za-z_-]*?)(?:(?P<single>\d+)|\[(?P<lo>\d+)-(?P<hi>\d+)\])"
    r"(?::gpu(?:(?P<gsingle>\d+)|\[(?P<glo>\d+)-(?P<ghi>\d+)\]))?$")


def parse_mesh(text: str, cluster: ClusterSpec) -> DeviceMesh:
    m = _MESH_RE.match(text.strip())
    if not m:
        raise ClusterError(f"cannot parse device mesh {text!r}")
    if m["single"] is not None:
        lo = hi = int(m["single"])
    else:
        lo, hi = int(m["lo"]), int(m["hi"])
    if m["gsingle"] is not None:
        glo = ghi = int(m["gsingle"])
    elif m["glo"] is not None:
        glo, ghi = int(m["glo"]), int(m["ghi"])
    else:
        glo, ghi = 0, cluster.gpus_per_node - 1
    if hi < lo or ghi < glo or lo < 1:
        raise ClusterError(f"empty or malformed range in mesh {text!r}")
    mesh = DeviceMesh(lo - 1, hi - lo + 1, glo, ghi - glo + 1)
    problems = mesh_violations(mesh, cluster)
    if problems:
        raise ClusterError(f"invalid mesh {text!r}: " + "; ".join(problems))
    return mesh
