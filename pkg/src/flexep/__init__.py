"""flexep: planning, analysis and simulation for elastic expert-parallel clusters."""

from .allocation import (
    AllocationPlan,
    allocate_replicas,
    allocation_from_replicas,
    allocation_skew,
)
from .core import (
    AvailabilityTrace,
    ClusterSpec,
    CostModel,
    ExpertLoads,
    InfeasibleError,
    LoadTrace,
    parse_availability_trace,
    parse_load_trace,
    serialize_availability_trace,
    serialize_load_trace,
    validate_cluster_spec,
)
from .dispatch import (
    DispatchSchedule,
    ReplicaMatrix,
    build_shuffle_index,
    compute_dispatch_schedule,
    gather_load_matrix,
    simulate_all_to_all,
)
from .migration import (
    NodeMapping,
    TransferSchedule,
    greedy_node_mapping,
    plan_state_transfers,
    transfer_cost,
)
from .placement import PlacementPlan, build_mro_plan, distinct_node_span, verify_mro
from .reliability import (
    McEstimate,
    baseline_placement,
    brute_force_optimal_probability,
    is_recoverable,
    recovery_probability_closed_form,
    recovery_probability_exact,
    recovery_probability_mc,
)
from .simulator import SimConfig, SimReport, emit_report, load_sim_config, run_simulation

__version__ = "0.1.0"
