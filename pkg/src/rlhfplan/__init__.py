"""Execution-plan search for multi-model RLHF training dataflows."""

from .cluster import ClusterSpec, DeviceMesh, enumerate_meshes, format_mesh, parse_mesh
from .cost_model import AnalyticProfile, CostConfig, CostModel, ProfileTable
from .model_arith import ModelSpec, param_count, preset
from .search import SearchConfig, brute_force, greedy_init, mh_search
from .simulator import augment, simulate, time_cost
from .strategy import Assignment, ExecutionPlan, ParallelStrategy, PruneConfig, enumerate_options
from .workflow import DataflowGraph, WorkloadSpec, build_ppo, build_workflow

__version__ = "0.1.0"

__all__ = [
    "AnalyticProfile", "Assignment", "ClusterSpec", "CostConfig", "CostModel", "DataflowGraph",
    "DeviceMesh", "ExecutionPlan", "ModelSpec", "ParallelStrategy", "ProfileTable", "PruneConfig",
    "SearchConfig", "WorkloadSpec", "augment", "brute_force", "build_ppo", "build_workflow",
    "enumerate_meshes", "enumerate_options", "format_mesh", "greedy_init", "mh_search",
    "param_count", "parse_mesh", "preset", "simulate", "time_cost",
]
