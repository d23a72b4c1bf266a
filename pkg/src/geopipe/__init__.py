"""Simulator and planner for pipeline-parallel training across WAN-linked datacenters."""
from .comm import (GBPS, MBPS, BandwidthQuery, TensorShape, activation_bytes, allreduce_time,
                   effective_pair_bandwidth, single_tcp_bandwidth, transfer_time)
from .dc_select import SelectionInput, SelectionReport, select, whatif
from .engine import execute, run
from .errors import ConfigError, Deadlock, InsufficientGpus
from .metrics import MetricsReport, report
from .scheduler import (ScheduleOptions, atlas_schedule, gpipe_schedule, make_schedule,
                        onef1b_schedule, varuna_schedule)
from .timeline import Schedule, Timeline
from .topology import ClusterTopology, Datacenter, WanProfile, load_topology, uniform_topology
from .workload import ComputeProfile, ModelSpec, ParallelismPlan, build_plan, resolve_compute

__all__ = [
    "GBPS", "MBPS", "BandwidthQuery", "TensorShape", "activation_bytes", "allreduce_time",
    "effective_pair_bandwidth", "single_tcp_bandwidth", "transfer_time",
    "SelectionInput", "SelectionReport", "select", "whatif", "execute", "run",
    "ConfigError", "Deadlock", "InsufficientGpus", "MetricsReport", "report",
    "ScheduleOptions", "atlas_schedule", "gpipe_schedule", "make_schedule", "onef1b_schedule",
    "varuna_schedule", "Schedule", "Timeline", "ClusterTopology", "Datacenter", "WanProfile",
    "load_topology", "uniform_topology", "ComputeProfile", "ModelSpec", "ParallelismPlan",
    "build_plan", "resolve_compute",
]
