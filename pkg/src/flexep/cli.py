"""Command-line interface.

Subcommands: plan, recover-prob, dispatch, migrate, simulate, gen-trace,
serve-controller, run-agent.  Exit codes: 0 success, 1 runtime failure,
2 invalid input.  Every subcommand is deterministic given its flags, input
files and seed.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import random
import sys
from fractions import Fraction
from pathlib import Path

from .allocation import allocate_replicas, allocation_skew
from .core import (
    AvailabilityTrace,
    AvailEvent,
    ClusterSpec,
    EVENT_ADD,
    EVENT_REMOVE,
    InfeasibleError,
    LoadRecord,
    LoadTrace,
    TraceParseError,
    TraceValidationError,
    parse_load_trace,
    serialize_availability_trace,
    serialize_load_trace,
    split_evenly,
    validate_cluster_spec,
)
from .dispatch import ReplicaMatrix, compute_dispatch_schedule
from .migration import greedy_node_mapping, plan_state_transfers, transfer_cost
from .placement import PlacementPlan, build_mro_plan, group_sizes
from .reliability import (
    EnumerationCapError,
    baseline_placement,
    recovery_probability_exact,
    recovery_probability_mc,
)
from .simulator import emit_report, load_sim_config, run_simulation

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


def _write_out(path: str | None, data: bytes) -> None:
    if path is None or path == "-":
        sys.stdout.write(data.decode())
    else:
        Path(path).write_bytes(data)


def _cluster_from_flags(args) -> ClusterSpec:
    return ClusterSpec(
        n_nodes=args.nodes,
        slots_per_node=args.slots,
        fault_threshold=min(args.fault_threshold, args.nodes),
    )


def _read_loads(args) -> tuple:
    trace = parse_load_trace(Path(args.loads).read_text())
    if not trace.records:
        raise CliError("load trace is empty")
    totals = trace.totals_for_layer(args.layer)
    return trace, totals


# -- plan ---------------------------------------------------------------------


def cmd_plan(args) -> int:
    spec = _cluster_from_flags(args)
    _, totals = _read_loads(args)
    try:
        validate_cluster_spec(spec, len(totals))
    except InfeasibleError as exc:
        raise CliError(str(exc))
    alloc = allocate_replicas(totals, spec)
    plan = build_mro_plan(alloc, spec, layer=args.layer)
    out = {
        "allocation": alloc.to_dict(),
        "placement": plan.to_dict(),
        "skew": allocation_skew(alloc, totals),
    }
    _write_out(args.out, (json.dumps(out, sort_keys=True) + "\n").encode())
    sizes = group_sizes(alloc, spec.n_nodes, spec.slots_per_node)
    print(f"replicas: {list(alloc.replicas)}", file=sys.stderr)
    print(f"node group sizes: {sizes}", file=sys.stderr)
    return EXIT_OK


# -- recover-prob ---------------------------------------------------------------


def _plan_for_strategy(strategy: str, alloc, spec, layer: int) -> PlacementPlan:
    if strategy == "mro":
        return build_mro_plan(alloc, spec, layer=layer)
    return baseline_placement(strategy, alloc, spec, layer=layer)


def cmd_recover_prob(args) -> int:
    spec = _cluster_from_flags(args)
    if args.plan:
        plans = {"file": PlacementPlan.from_dict(json.loads(Path(args.plan).read_text()))}
    else:
        if not args.loads:
            raise CliError("need --plan or --loads")
        _, totals = _read_loads(args)
        alloc = allocate_replicas(totals, spec)
        strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
        plans = {
            s: _plan_for_strategy(s, alloc, spec, args.layer) for s in strategies
        }
    k_values = (
        [args.k] if args.k is not None else list(range(0, args.k_max + 1))
    )
    lines = ["k_failed,strategy,probability_num,probability_den,probability_real"]
    for name, plan in sorted(plans.items()):
        for k in k_values:
            if args.mc:
                est = recovery_probability_mc(plan, k, args.mc, args.seed)
                lines.append(f"{k},{name},,,{est.value:.6f}")
                continue
            try:
                p = recovery_probability_exact(plan, k)
            except EnumerationCapError as exc:
                raise CliError(f"{exc} (pass --mc SAMPLES)", code=EXIT_RUNTIME)
            lines.append(
                f"{k},{name},{p.numerator},{p.denominator},{float(p):.6f}"
            )
    _write_out(args.out, ("\n".join(lines) + "\n").encode())
    return EXIT_OK


# -- dispatch -------------------------------------------------------------------


def cmd_dispatch(args) -> int:
    t_matrix = json.loads(Path(args.t_matrix).read_text())
    if args.r_matrix:
        rmat = ReplicaMatrix(tuple(tuple(row) for row in json.loads(Path(args.r_matrix).read_text())))
    elif args.plan:
        plan = PlacementPlan.from_dict(json.loads(Path(args.plan).read_text()))
        rmat = ReplicaMatrix.from_plan(plan)
    else:
        raise CliError("need --r-matrix or --plan")
    n_ranks = rmat.n_ranks
    scheds = [compute_dispatch_schedule(i, t_matrix, rmat) for i in range(n_ranks)]
    out = {"ranks": [s.to_dict() for s in scheds]}
    _write_out(args.out, (json.dumps(out, sort_keys=True) + "\n").encode())
    return EXIT_OK


# -- migrate --------------------------------------------------------------------


def cmd_migrate(args) -> int:
    old = PlacementPlan.from_dict(json.loads(Path(args.old_plan).read_text()))
    new = PlacementPlan.from_dict(json.loads(Path(args.new_plan).read_text()))
    live = [int(v) for v in args.live.split(",")] if args.live else list(
        range(new.n_nodes)
    )
    holdings = {
        node: set((old.layer, e) for e in old.col_sets[j])
        for j, node in enumerate(range(old.n_nodes))
        if node in live
    }
    cols = [set((new.layer, e) for e in new.col_sets[j]) for j in range(new.n_nodes)]
    mapping = greedy_node_mapping(holdings, cols, live)
    owners: dict = {}
    for node, items in holdings.items():
        for item in items:
            owners.setdefault(item, []).append(node)
    schedule = plan_state_transfers(mapping, owners, state_size=args.state_size)
    out = {
        "assignment": [list(p) for p in mapping.assignment],
        "cost": transfer_cost(mapping),
        "transfers": schedule.to_dict()["transfers"],
    }
    _write_out(args.out, (json.dumps(out, sort_keys=True) + "\n").encode())
    return EXIT_OK


# -- simulate ---------------------------------------------------------------------


def cmd_simulate(args) -> int:
    config = load_sim_config(args.config)
    report = run_simulation(config)
    _write_out(args.out, emit_report(report, args.format))
    totals = " ".join(f"{k}={v:.1f}s" for k, v in sorted(report.totals.items()))
    print(
        f"steps={report.steps_completed} samples={report.cum_samples} "
        f"halted={report.halted or 'no'} {totals}",
        file=sys.stderr,
    )
    return EXIT_OK


# -- gen-trace ---------------------------------------------------------------------


def _gen_skew_sweep(args) -> str:
    ratio_start = Fraction(args.ratio)
    ratio_end = Fraction(args.ratio_end) if args.ratio_end else ratio_start
    if ratio_start < 1 or ratio_end < 1:
        raise CliError("skew ratio must be >= 1")
    if max(ratio_start, ratio_end) > args.experts:
        raise CliError("skew ratio cannot exceed the expert count")
    records = []
    steps = args.steps
    for step in range(steps):
        if steps > 1:
            ratio = ratio_start + (ratio_end - ratio_start) * step / (steps - 1)
        else:
            ratio = ratio_start
        top = round(ratio * args.tokens / args.experts)
        rest = split_evenly(args.tokens - top, args.experts - 1) if args.experts > 1 else []
        counts = rest[: args.top_expert] + [top] + rest[args.top_expert :]
        for layer in range(args.layers):
            records.append(LoadRecord(step, layer, tuple(counts)))
    return serialize_load_trace(LoadTrace(tuple(records), args.experts))


def _gen_synthetic_spot(args) -> str:
    rng = random.Random(args.seed)
    events = [AvailEvent(0.0, EVENT_ADD, tuple(range(args.nodes)))]
    live = set(range(args.nodes))
    pool = []
    t = 0.0
    next_id = args.nodes
    while t < args.duration:
        t += rng.expovariate(args.preempt_rate / 60.0)
        if t >= args.duration:
            break
        if len(live) > args.min_nodes and (not pool or rng.random() < 0.6):
            victim = rng.choice(sorted(live))
            live.remove(victim)
            pool.append(victim)
            events.append(AvailEvent(round(t, 3), EVENT_REMOVE, (victim,)))
        elif pool:
            k = rng.randint(1, min(len(pool), 3))
            joining = tuple(pool[:k])
            del pool[:k]
            live.update(joining)
            events.append(AvailEvent(round(t, 3), EVENT_ADD, joining))
    return serialize_availability_trace(AvailabilityTrace(tuple(events)))


def cmd_gen_trace(args) -> int:
    if args.kind == "skew-sweep":
        text = _gen_skew_sweep(args)
    else:
        text = _gen_synthetic_spot(args)
    _write_out(args.out, text.encode())
    return EXIT_OK


# -- control plane roles -------------------------------------------------------------


def cmd_serve_controller(args) -> int:
    from .control_plane.controller import Controller

    host, port = args.listen.rsplit(":", 1)

    async def main() -> None:
        controller = Controller(
            n_layers=args.layers,
            n_experts=args.experts,
            slots_per_node=args.slots,
            fault_threshold=args.fault_threshold,
            host=host,
            port=int(port),
            heartbeat_period=args.heartbeat_period,
            timeout_multiplier=args.timeout_multiplier,
            expect_nodes=args.expect_nodes,
            blob_size=args.blob_size,
        )
        await controller.start()
        print(f"controller listening on {controller.host}:{controller.port}", flush=True)
        if args.state_file:
            while True:
                await asyncio.sleep(args.heartbeat_period)
                snapshot = {
                    "plan_version": controller.plan_version,
                    "live": controller.live_nodes(),
                    "events": [
                        {"kind": e.kind, "detail": e.detail}
                        for e in controller.events
                    ],
                }
                Path(args.state_file).write_text(
                    json.dumps(snapshot, sort_keys=True) + "\n"
                )
        else:
            await asyncio.Event().wait()

    try:
        asyncio.run(main())
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def cmd_run_agent(args) -> int:
    from .control_plane.agent import Agent

    host, port = args.controller.rsplit(":", 1)

    async def main() -> None:
        agent = Agent(
            node_id=args.node_id,
            controller_host=host,
            controller_port=int(port),
            heartbeat_period=args.heartbeat_period,
            blob_size=args.blob_size,
            listen_port=args.listen_port,
        )
        await agent.start()
        print(f"agent {args.node_id} serving fetches on port {agent.fetch_port}", flush=True)
        await agent.run_until_stopped()

    try:
        asyncio.run(main())
    except KeyboardInterrupt:
        pass
    return EXIT_OK


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flexep", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def add_cluster_flags(sp):
        sp.add_argument("--nodes", "-n", type=int, required=True)
        sp.add_argument("--slots", "-c", type=int, required=True)
        sp.add_argument("--fault-threshold", "-f", type=int, default=2)

    sp = sub.add_parser("plan", help="compute replica allocation and placement")
    sp.add_argument("--loads", required=True, help="load trace (JSONL)")
    sp.add_argument("--layer", type=int, default=0)
    add_cluster_flags(sp)
    sp.add_argument("--out", default="-")
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("recover-prob", help="recovery probability vs failures (CSV)")
    sp.add_argument("--loads")
    sp.add_argument("--plan", help="placement plan JSON (instead of --loads)")
    sp.add_argument("--layer", type=int, default=0)
    add_cluster_flags(sp)
    sp.add_argument("--k", type=int, default=None, help="single failure count")
    sp.add_argument("--k-max", type=int, default=0)
    sp.add_argument(
        "--strategies", default="mro,spread,compact", help="comma-separated"
    )
    sp.add_argument("--mc", type=int, default=0, help="Monte Carlo sample count")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default="-")
    sp.set_defaults(func=cmd_recover_prob)

    sp = sub.add_parser("dispatch", help="per-rank dispatch schedules (JSON)")
    sp.add_argument("--t-matrix", required=True, help="JSON E x N token matrix")
    sp.add_argument("--r-matrix", help="JSON E x N replica matrix")
    sp.add_argument("--plan", help="placement plan JSON")
    sp.add_argument("--out", default="-")
    sp.set_defaults(func=cmd_dispatch)

    sp = sub.add_parser("migrate", help="node mapping and transfer schedule")
    sp.add_argument("--old-plan", required=True)
    sp.add_argument("--new-plan", required=True)
    sp.add_argument("--live", help="comma-separated physical node ids")
    sp.add_argument("--state-size", type=int, default=0)
    sp.add_argument("--out", default="-")
    sp.set_defaults(func=cmd_migrate)

    sp = sub.add_parser("simulate", help="run the elasticity simulator")
    sp.add_argument("--config", required=True, help="SimConfig JSON file")
    sp.add_argument("--format", choices=("csv", "json"), default="csv")
    sp.add_argument("--out", default="-")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("gen-trace", help="generate synthetic traces")
    sp.add_argument("--kind", choices=("skew-sweep", "synthetic-spot"), required=True)
    sp.add_argument("--out", default="-")
    sp.add_argument("--seed", type=int, default=0)
    # skew-sweep
    sp.add_argument("--experts", type=int, default=8)
    sp.add_argument("--layers", type=int, default=1)
    sp.add_argument("--steps", type=int, default=1)
    sp.add_argument("--tokens", type=int, default=8000, help="total tokens per step")
    sp.add_argument("--ratio", default="1", help="top expert load vs uniform share")
    sp.add_argument("--ratio-end", default=None, help="sweep end ratio")
    sp.add_argument("--top-expert", type=int, default=0)
    # synthetic-spot
    sp.add_argument("--nodes", type=int, default=10)
    sp.add_argument("--duration", type=float, default=3600.0)
    sp.add_argument("--preempt-rate", type=float, default=1.0, help="events per minute")
    sp.add_argument("--min-nodes", type=int, default=2)
    sp.set_defaults(func=cmd_gen_trace)

    sp = sub.add_parser("serve-controller", help="run the cluster controller")
    sp.add_argument("--listen", default="127.0.0.1:0")
    sp.add_argument("--layers", type=int, required=True)
    sp.add_argument("--experts", type=int, required=True)
    sp.add_argument("--slots", type=int, required=True)
    sp.add_argument("--fault-threshold", type=int, default=2)
    sp.add_argument("--heartbeat-period", type=float, default=1.0)
    sp.add_argument("--timeout-multiplier", type=float, default=2.5)
    sp.add_argument("--expect-nodes", type=int, default=None)
    sp.add_argument("--blob-size", type=int, default=4096)
    sp.add_argument("--state-file", default=None)
    sp.set_defaults(func=cmd_serve_controller)

    sp = sub.add_parser("run-agent", help="run a node agent")
    sp.add_argument("--controller", required=True, help="host:port")
    sp.add_argument("--node-id", type=int, required=True)
    sp.add_argument("--heartbeat-period", type=float, default=1.0)
    sp.add_argument("--blob-size", type=int, default=4096)
    sp.add_argument("--listen-port", type=int, default=0)
    sp.set_defaults(func=cmd_run_agent)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (TraceParseError, TraceValidationError, InfeasibleError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def console_main() -> None:
    sys.exit(main())
