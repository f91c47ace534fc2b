"""Hourly flow routing: scenario decisions, apportionment, OD assembly.

The engine evaluates three phases in order for every hour, each consuming
volume from the raw counts before the next runs:

1. *Internal*: the signed imbalance between the boundary booth's inbound
   and outbound series becomes circulation between the two local
   sub-regions. Its magnitude is deducted from the configured ramp (capped
   at what the ramp actually counted; shortfalls are ledgered).
2. *Local*: whatever remains on the onramp enters the area, whatever
   remains on the offramp leaves it (roles reversed: destinations act as
   origins).
3. *Passthrough*: for each booth pair, the shared minimum bypasses the
   area entirely; the absolute difference is net inflow or outflow routed
   against the inferred destinations.

Decided volumes are distributed with the hour's joint (destination,
category) probability distribution: the destination marginal is
renormalized over the scenario's eligible subset, integerized by largest
remainder, then each destination's share is split across categories the
same way. Every step is integer-exact, so vehicles are conserved.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum
from math import floor
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import (
    CATEGORY_ORDER,
    HourKey,
    RoutingReportObservation,
    VehicleCategory,
    VehicleType,
    map_vehicle_type,
)
from .errors import DataError, InternalError
from .fusion import FusionModel, predict_matrix
from .ingest import feature_vector
from .network import NetworkConfig

__all__ = [
    "Scenario",
    "FlowDecision",
    "JointDistribution",
    "Marginals",
    "ODEntry",
    "ODMatrix",
    "LedgerEvent",
    "RoutingRun",
    "largest_remainder",
    "infer_joint_distribution",
    "marginals",
    "decide_flows",
    "distribute",
    "build_od_matrix",
    "write_od_csv",
    "write_ledger_csv",
    "conservation_violations",
]

MASS_TOLERANCE = 1e-9


class Scenario(Enum):
    INTERNAL = "Internal"
    LOCAL_INFLOW = "LocalInflow"
    LOCAL_OUTFLOW = "LocalOutflow"
    PASSTHROUGH_NET = "PassthroughNet"
    PASSTHROUGH_BYPASS = "PassthroughBypass"


@dataclass(frozen=True)
class FlowDecision:
    """One hour's routed volume for one scenario.

    ``reversed_roles`` marks flows that drain the area: OD entries then run
    from the eligible destinations to ``origin`` (the sink). A bypass
    decision's single eligible destination is its paired booth.
    """

    hour: HourKey
    scenario: Scenario
    direction: str
    volume: int
    origin: str
    eligible_destinations: tuple[str, ...]
    reversed_roles: bool = False

    def __post_init__(self) -> None:
        if self.volume < 0:
            raise InternalError(f"negative decision volume {self.volume}")
        if self.scenario is Scenario.PASSTHROUGH_BYPASS and len(self.eligible_destinations) != 1:
            raise InternalError("bypass decisions have exactly one destination")


@dataclass(frozen=True)
class JointDistribution:
    """Probability mass over (destination, category) pairs for one hour."""

    hour: HourKey
    mass: dict[tuple[str, VehicleCategory], float]
    fallback_uniform: bool = False

    def __post_init__(self) -> None:
        total = sum(self.mass.values())
        if abs(total - 1.0) > MASS_TOLERANCE:
            raise DataError(f"joint distribution sums to {total!r}, not 1")
        if any(v < 0 for v in self.mass.values()):
            raise DataError("joint distribution has negative mass")

    def destinations(self) -> list[str]:
        seen: dict[str, None] = {}
        for dest, _ in self.mass:
            seen.setdefault(dest)
        return list(seen)


@dataclass(frozen=True)
class Marginals:
    global_by_destination: dict[str, float]
    per_destination: dict[str, dict[VehicleCategory, float]]
    uniform_category_destinations: tuple[str, ...]


@dataclass(frozen=True)
class ODEntry:
    hour: HourKey
    origin: str
    destination: str
    vehicle_type: VehicleType
    count: int
    scenario: Scenario
    direction: str


@dataclass
class ODMatrix:
    entries: list[ODEntry]

    def total(self) -> int:
        return sum(e.count for e in self.entries)


@dataclass(frozen=True)
class LedgerEvent:
    """Audit record: decisions made, volumes consumed, per-hour balance."""

    hour: HourKey
    entry_type: str  # decision | consume | balance
    scenario: str
    direction: str
    key: str
    amount: int
    flag: str = ""


@dataclass
class RoutingRun:
    matrix: ODMatrix
    decisions: list[FlowDecision]
    ledger: list[LedgerEvent]
    entries_by_decision: list[tuple[FlowDecision, list[ODEntry]]]


def largest_remainder(total: int, weights: Sequence[float]) -> list[int]:
    """Integerize ``total * weights`` without over- or under-allocating.

    Quotas are floored; leftover units go to the largest fractional
    remainders, ties broken by larger weight then earlier index. Every
    output is floor(quota) or ceil(quota) and the outputs sum to ``total``.
    """
    if total < 0:
        raise DataError(f"total must be non-negative, got {total}")
    if any(w < 0 for w in weights):
        raise DataError("weights must be non-negative")
    s = sum(weights)
    if abs(s - 1.0) > MASS_TOLERANCE:
        raise DataError(f"weights sum to {s!r}, not 1")
    quotas = [total * w for w in weights]
    result = [floor(q) for q in quotas]
    extras = total - sum(result)
    if extras < 0 or extras > len(weights):
        raise InternalError(f"apportionment drift: {extras} extras for {len(weights)} weights")
    order = sorted(
        range(len(weights)),
        key=lambda i: (-(quotas[i] - result[i]), -weights[i], i),
    )
    for i in order[:extras]:
        result[i] += 1
    return result


def joint_from_predictions(
    hour: HourKey,
    destination_names: Sequence[str],
    category_counts: np.ndarray,
    censored: Sequence[bool],
) -> JointDistribution:
    """Normalize clamped per-destination category predictions into a joint.

    Censored inputs contribute zero mass. If nothing remains (for example a
    night hour where every report was suppressed) the joint falls back to
    uniform and is flagged.
    """
    table = np.maximum(np.asarray(category_counts, dtype=np.float64), 0.0)
    for i, is_censored in enumerate(censored):
        if is_censored:
            table[i, :] = 0.0
    total = float(table.sum())
    mass: dict[tuple[str, VehicleCategory], float] = {}
    if total <= 0.0:
        uniform = 1.0 / (len(destination_names) * len(CATEGORY_ORDER))
        for dest in destination_names:
            for cat in CATEGORY_ORDER:
                mass[(dest, cat)] = uniform
        return JointDistribution(hour=hour, mass=mass, fallback_uniform=True)
    for i, dest in enumerate(destination_names):
        for j, cat in enumerate(CATEGORY_ORDER):
            mass[(dest, cat)] = float(table[i, j]) / total
    return JointDistribution(hour=hour, mass=mass)


def infer_joint_distribution(
    model: FusionModel,
    routing_rows: list[RoutingReportObservation],
    hour: HourKey,
) -> JointDistribution:
    """Predict category counts at each destination and normalize to a joint."""
    rows = [r for r in routing_rows if r.hour.timestamp == hour.timestamp]
    if not rows:
        raise DataError(f"no destination routing rows for hour {hour.isoformat()}")
    names = [r.node.name for r in rows]
    if len(set(names)) != len(names):
        raise DataError(f"duplicate destination rows for hour {hour.isoformat()}")
    X = np.stack([feature_vector(r).to_array() for r in rows])
    preds = predict_matrix(model, X)[:, 1:]  # category columns only
    return joint_from_predictions(hour, names, preds, [r.censored for r in rows])


def marginals(joint: JointDistribution) -> Marginals:
    """Destination marginal plus per-destination category distributions."""
    global_by_dest: dict[str, float] = {}
    for (dest, _), p in joint.mass.items():
        global_by_dest[dest] = global_by_dest.get(dest, 0.0) + p
    per_dest: dict[str, dict[VehicleCategory, float]] = {}
    flagged: list[str] = []
    for dest in joint.destinations():
        weight = global_by_dest[dest]
        if weight > 0.0:
            per_dest[dest] = {
                cat: joint.mass.get((dest, cat), 0.0) / weight for cat in CATEGORY_ORDER
            }
        else:
            flagged.append(dest)
            per_dest[dest] = {cat: 1.0 / len(CATEGORY_ORDER) for cat in CATEGORY_ORDER}
    return Marginals(
        global_by_destination=global_by_dest,
        per_destination=per_dest,
        uniform_category_destinations=tuple(flagged),
    )


class _CountLedger:
    """Tracks per-key consumption across phases within one hour."""

    def __init__(self, counts: Mapping[str, int]):
        self.raw = dict(counts)
        self.consumed: dict[str, int] = {}

    def remaining(self, key: str) -> int:
        left = self.raw[key] - self.consumed.get(key, 0)
        if left < 0:
            raise InternalError(f"negative residual for count key {key!r}: {left}")
        return left

    def consume(self, key: str, amount: int) -> None:
        self.consumed[key] = self.consumed.get(key, 0) + amount
        self.remaining(key)


def decide_flows(
    network: NetworkConfig,
    counts: Mapping[str, int | float],
    hour: HourKey,
) -> tuple[list[FlowDecision], list[LedgerEvent]]:
    """Run the three routing phases on one hour of tollbooth totals.

    ``counts`` maps count keys (station names, direction-qualified where
    split) to hourly totals. All keys referenced by the network config must
    be present.
    """
    referenced = network.referenced_count_keys()
    missing = [k for k in referenced if k not in counts]
    if missing:
        raise DataError(f"missing tollbooth counts for {missing} at {hour.isoformat()}")
    for key in referenced:
        v = counts[key]
        if v < 0 or int(v) != v:
            raise DataError(f"count for {key!r} must be a non-negative integer, got {v!r}")

    ledger = _CountLedger({k: int(counts[k]) for k in referenced})
    decisions: list[FlowDecision] = []
    events: list[LedgerEvent] = []

    def record(decision: FlowDecision) -> None:
        decisions.append(decision)
        events.append(
            LedgerEvent(
                hour=hour,
                entry_type="decision",
                scenario=decision.scenario.value,
                direction=decision.direction,
                key=decision.origin,
                amount=decision.volume,
            )
        )

    # Phase 1: internal circulation across the boundary booth.
    boundary = network.boundary
    if boundary is not None:
        imbalance = ledger.remaining(boundary.inbound_key) - ledger.remaining(boundary.outbound_key)
        if imbalance != 0:
            side = boundary.positive if imbalance > 0 else boundary.negative
            volume = abs(imbalance)
            assert network.ramps is not None  # enforced by config validation
            ramp_key = network.ramps.onramp if side.consumes == "onramp" else network.ramps.offramp
            applied = min(volume, ledger.remaining(ramp_key))
            ledger.consume(ramp_key, applied)
            events.append(
                LedgerEvent(
                    hour=hour,
                    entry_type="consume",
                    scenario=Scenario.INTERNAL.value,
                    direction=side.label,
                    key=ramp_key,
                    amount=applied,
                    flag="capped" if applied < volume else "",
                )
            )
            record(
                FlowDecision(
                    hour=hour,
                    scenario=Scenario.INTERNAL,
                    direction=side.label,
                    volume=volume,
                    origin=boundary.node,
                    eligible_destinations=tuple(network.group_members(side.groups)),
                )
            )

    # Phase 2: remaining ramp traffic enters or leaves the area.
    if network.ramps is not None:
        inflow = ledger.remaining(network.ramps.onramp)
        if inflow > 0:
            ledger.consume(network.ramps.onramp, inflow)
            record(
                FlowDecision(
                    hour=hour,
                    scenario=Scenario.LOCAL_INFLOW,
                    direction="onramp:in",
                    volume=inflow,
                    origin=network.ramps.onramp,
                    eligible_destinations=tuple(
                        network.group_members(network.scenario_subsets["LocalInflow"])
                    ),
                )
            )
        outflow = ledger.remaining(network.ramps.offramp)
        if outflow > 0:
            ledger.consume(network.ramps.offramp, outflow)
            record(
                FlowDecision(
                    hour=hour,
                    scenario=Scenario.LOCAL_OUTFLOW,
                    direction="offramp:out",
                    volume=outflow,
                    origin=network.ramps.offramp,
                    eligible_destinations=tuple(
                        network.group_members(network.scenario_subsets["LocalOutflow"])
                    ),
                    reversed_roles=True,
                )
            )

    # Phase 3: paired booths, shared minimum bypasses, difference is net.
    # Both decisions are always recorded, at volume zero when balanced, so
    # the ledger carries each pair's full disposition for every hour.
    for pair in network.passthrough_pairs:
        up = ledger.remaining(pair.upstream)
        down = ledger.remaining(pair.downstream)
        record(
            FlowDecision(
                hour=hour,
                scenario=Scenario.PASSTHROUGH_BYPASS,
                direction=f"{pair.axis}:bypass",
                volume=min(up, down),
                origin=pair.upstream,
                eligible_destinations=(pair.downstream,),
            )
        )
        net = up - down
        eligible = tuple(network.group_members(network.scenario_subsets["PassthroughNet"]))
        if net >= 0:
            record(
                FlowDecision(
                    hour=hour,
                    scenario=Scenario.PASSTHROUGH_NET,
                    direction=f"{pair.axis}:inflow",
                    volume=net,
                    origin=pair.upstream,
                    eligible_destinations=eligible,
                )
            )
        else:
            record(
                FlowDecision(
                    hour=hour,
                    scenario=Scenario.PASSTHROUGH_NET,
                    direction=f"{pair.axis}:outflow",
                    volume=-net,
                    origin=pair.downstream,
                    eligible_destinations=eligible,
                    reversed_roles=True,
                )
            )

    events.append(
        LedgerEvent(
            hour=hour,
            entry_type="balance",
            scenario="",
            direction="",
            key="total",
            amount=sum(d.volume for d in decisions),
        )
    )
    return decisions, events


def distribute(decision: FlowDecision, joint: JointDistribution) -> list[ODEntry]:
    """Turn one decision into integer OD entries using the hour's joint.

    Bypass volumes skip the distribution entirely and emit one aggregate
    entry toward the paired booth. Everything else is split across the
    eligible destinations by the renormalized destination marginal, then
    across categories per destination; both splits use largest remainder.
    """
    if decision.volume == 0:
        return []
    if decision.scenario is Scenario.PASSTHROUGH_BYPASS:
        return [
            ODEntry(
                hour=decision.hour,
                origin=decision.origin,
                destination=decision.eligible_destinations[0],
                vehicle_type=VehicleType.ALL,
                count=decision.volume,
                scenario=decision.scenario,
                direction=decision.direction,
            )
        ]
    known = set(joint.destinations())
    unknown = [d for d in decision.eligible_destinations if d not in known]
    if unknown:
        raise DataError(
            f"eligible destinations {unknown} absent from the joint distribution "
            f"at {decision.hour.isoformat()}"
        )
    marg = marginals(joint)
    shares = [marg.global_by_destination[d] for d in decision.eligible_destinations]
    mass = sum(shares)
    if mass > 0.0:
        weights = [s / mass for s in shares]
    else:
        weights = [1.0 / len(shares)] * len(shares)
    dest_counts = largest_remainder(decision.volume, weights)
    entries: list[ODEntry] = []
    for dest, dest_count in zip(decision.eligible_destinations, dest_counts):
        if dest_count == 0:
            continue
        cat_dist = marg.per_destination[dest]
        cat_counts = largest_remainder(dest_count, [cat_dist[c] for c in CATEGORY_ORDER])
        for cat, cat_count in zip(CATEGORY_ORDER, cat_counts):
            if cat_count == 0:
                continue
            origin, destination = (
                (dest, decision.origin) if decision.reversed_roles else (decision.origin, dest)
            )
            entries.append(
                ODEntry(
                    hour=decision.hour,
                    origin=origin,
                    destination=destination,
                    vehicle_type=map_vehicle_type(cat),
                    count=cat_count,
                    scenario=decision.scenario,
                    direction=decision.direction,
                )
            )
    return entries


def _counts_by_hour(tollbooth) -> dict[object, dict[str, int]]:
    by_hour: dict[object, dict[str, int]] = {}
    for obs in tollbooth:
        key = obs.join_key()
        slot = by_hour.setdefault(obs.hour.timestamp, {})
        if key in slot:
            raise DataError(f"duplicate tollbooth series {key!r} at {obs.hour.isoformat()}")
        slot[key] = int(obs.counts.total)
    return by_hour


def build_od_matrix(
    network: NetworkConfig,
    model: FusionModel,
    tollbooth,
    routing,
    hours: Iterable[HourKey] | None = None,
) -> RoutingRun:
    """Assemble the OD matrix over a range of hours.

    For each hour: infer the joint distribution from the destination
    routing reports, decide scenario volumes from the tollbooth totals,
    distribute, and append to the conservation ledger. ``hours`` defaults
    to every hour present in the tollbooth data.
    """
    counts_by_hour = _counts_by_hour(tollbooth)
    dest_names = network.destination_names()
    dest_set = set(dest_names)
    dest_rows: dict[object, list[RoutingReportObservation]] = {}
    for obs in routing:
        if obs.node.name in dest_set:
            dest_rows.setdefault(obs.hour.timestamp, []).append(obs)

    if hours is None:
        hour_keys = sorted(
            {obs.hour.timestamp: obs.hour for obs in tollbooth}.values(),
            key=lambda h: h.timestamp,
        )
    else:
        hour_keys = sorted(hours, key=lambda h: h.timestamp)

    # Batch all destination predictions up front; per-hour loops only slice.
    flat_rows: list[RoutingReportObservation] = []
    offsets: dict[object, tuple[int, int]] = {}
    for hk in hour_keys:
        rows = dest_rows.get(hk.timestamp, [])
        offsets[hk.timestamp] = (len(flat_rows), len(rows))
        flat_rows.extend(rows)
    if flat_rows:
        X = np.stack([feature_vector(r).to_array() for r in flat_rows])
        all_preds = predict_matrix(model, X)[:, 1:]
    else:
        all_preds = np.zeros((0, len(CATEGORY_ORDER)))

    matrix_entries: list[ODEntry] = []
    all_decisions: list[FlowDecision] = []
    ledger: list[LedgerEvent] = []
    grouped: list[tuple[FlowDecision, list[ODEntry]]] = []
    for hk in hour_keys:
        counts = counts_by_hour.get(hk.timestamp)
        if counts is None:
            raise DataError(f"no tollbooth counts for hour {hk.isoformat()}")
        start, n_rows = offsets[hk.timestamp]
        rows = flat_rows[start : start + n_rows]
        if not rows:
            raise DataError(f"no destination routing rows for hour {hk.isoformat()}")
        names = [r.node.name for r in rows]
        if len(set(names)) != len(names):
            raise DataError(f"duplicate destination rows for hour {hk.isoformat()}")
        joint = joint_from_predictions(
            hk, names, all_preds[start : start + n_rows], [r.censored for r in rows]
        )
        if joint.fallback_uniform:
            ledger.append(
                LedgerEvent(
                    hour=hk,
                    entry_type="consume",
                    scenario="",
                    direction="",
                    key="joint",
                    amount=0,
                    flag="uniform_fallback",
                )
            )
        decisions, events = decide_flows(network, counts, hk)
        ledger.extend(events)
        for decision in decisions:
            entries = distribute(decision, joint)
            grouped.append((decision, entries))
            matrix_entries.extend(entries)
        all_decisions.extend(decisions)
    return RoutingRun(
        matrix=ODMatrix(entries=matrix_entries),
        decisions=all_decisions,
        ledger=ledger,
        entries_by_decision=grouped,
    )


def conservation_violations(run: RoutingRun) -> list[str]:
    """Check that no vehicle was created or destroyed anywhere in the run."""
    problems: list[str] = []
    for decision, entries in run.entries_by_decision:
        allocated = sum(e.count for e in entries)
        if decision.volume != allocated:
            problems.append(
                f"{decision.hour.isoformat()} {decision.scenario.value} {decision.direction}: "
                f"decided {decision.volume}, allocated {allocated}"
            )
    balances = {
        e.hour.timestamp: e.amount for e in run.ledger if e.entry_type == "balance"
    }
    decided: dict[object, int] = {}
    for d in run.decisions:
        decided[d.hour.timestamp] = decided.get(d.hour.timestamp, 0) + d.volume
    for ts, balance in balances.items():
        if decided.get(ts, 0) != balance:
            problems.append(f"balance mismatch at {ts}: ledger {balance}, decisions {decided.get(ts, 0)}")
    return problems


def write_od_csv(path: str | Path, matrix: ODMatrix) -> None:
    rows = sorted(
        (e for e in matrix.entries if e.count > 0),
        key=lambda e: (
            e.hour.timestamp,
            e.scenario.value,
            e.origin,
            e.destination,
            e.vehicle_type.value,
        ),
    )
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", "origin", "destination", "vehicle_type", "count", "scenario"])
        for e in rows:
            writer.writerow(
                [e.hour.isoformat(), e.origin, e.destination, e.vehicle_type.value, e.count, e.scenario.value]
            )


def write_ledger_csv(path: str | Path, ledger: list[LedgerEvent]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", "entry_type", "scenario", "direction", "key", "amount", "flag"])
        for e in ledger:
            writer.writerow(
                [e.hour.isoformat(), e.entry_type, e.scenario, e.direction, e.key, e.amount, e.flag]
            )
