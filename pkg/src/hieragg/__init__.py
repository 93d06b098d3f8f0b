"""Hierarchical aggregation of keyed sensor streams.

Sensor measurements are rolled up into (nested, possibly overlapping)
sensor groups by a dataflow built on stream/table duality; group results
are fed back as measurements so groups of groups aggregate too. A
deterministic simulated runtime executes the dataflow over partitions and
worker instances, with failures and rebalancing.
"""

from .hierarchy import (
    CycleError,
    DuplicateIdentifierError,
    HierarchyError,
    MembershipEvent,
    MembershipSet,
    MembershipTable,
    apply_membership_event,
    build_nested_hierarchy,
    parents_of,
    validate,
)
from .model import TOMBSTONE, ChangelogEvent, Record, Table, partition_for
from .topology import (
    AggregationResult,
    Measurement,
    Topology,
    build_topology,
    convert_result,
    duplicate_for_parents,
    process_to_quiescence,
    update_last_value,
)
from .runtime import ClusterState, advance, create_cluster, inject_failure, rebalance, recover
from .workload import WorkloadSpec, generate_tick

__version__ = "0.1.0"

__all__ = [
    "CycleError",
    "DuplicateIdentifierError",
    "HierarchyError",
    "MembershipEvent",
    "MembershipSet",
    "MembershipTable",
    "apply_membership_event",
    "build_nested_hierarchy",
    "parents_of",
    "validate",
    "TOMBSTONE",
    "ChangelogEvent",
    "Record",
    "Table",
    "partition_for",
    "AggregationResult",
    "Measurement",
    "Topology",
    "build_topology",
    "convert_result",
    "duplicate_for_parents",
    "process_to_quiescence",
    "update_last_value",
    "ClusterState",
    "advance",
    "create_cluster",
    "inject_failure",
    "rebalance",
    "recover",
    "WorkloadSpec",
    "generate_tick",
]
