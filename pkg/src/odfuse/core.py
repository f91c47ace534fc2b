"""Shared domain vocabulary: time keys, nodes, vehicle categories and counts.

Everything here is an immutable value type, safe to share between threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum

from .errors import DataError

__all__ = [
    "HourKey",
    "RoadTag",
    "VehicleCategory",
    "VehicleType",
    "NodeKind",
    "NodeId",
    "CountsByCategory",
    "Direction",
    "TollboothObservation",
    "RoutingReportObservation",
    "make_hour_key",
    "category_of_length",
    "map_vehicle_type",
    "CATEGORY_ORDER",
]


class RoadTag(Enum):
    """Road hierarchy tag attached to every mobility report."""

    PRIMARY = "Primary"
    TRUNK = "Trunk"
    SECONDARY = "Secondary"

    @classmethod
    def parse(cls, raw: str) -> "RoadTag":
        for tag in cls:
            if tag.value == raw:
                return tag
        allowed = ", ".join(t.value for t in cls)
        raise DataError(f"unknown road tag {raw!r}; allowed: {allowed}")


class VehicleCategory(Enum):
    """Vehicle length bands. Lower bound closed, upper bound open.

    The six bands partition (0, inf); the top band has no upper bound.
    """

    UNDER_5_6 = ("under_5_6", 0.0, 5.6)
    L5_6_TO_7_6 = ("5_6_to_7_6", 5.6, 7.6)
    L7_6_TO_12_5 = ("7_6_to_12_5", 7.6, 12.5)
    L12_5_TO_16_0 = ("12_5_to_16_0", 12.5, 16.0)
    L16_0_TO_24_0 = ("16_0_to_24_0", 16.0, 24.0)
    OVER_24_0 = ("over_24_0", 24.0, None)

    def __init__(self, key: str, lower_m: float, upper_m: float | None):
        self.key = key
        self.lower_m = lower_m
        self.upper_m = upper_m


CATEGORY_ORDER: tuple[VehicleCategory, ...] = tuple(VehicleCategory)


class VehicleType(Enum):
    """Simulation-facing vehicle types, one per length band."""

    PASSENGER_VEHICLE = "PassengerVehicle"
    LIGHT_COMMERCIAL = "LightCommercial"
    BUS_MEDIUM_TRUCK = "BusMediumTruck"
    HEAVY_RIGID_SHORT_ARTICULATED = "HeavyRigidShortArticulated"
    ARTICULATED_HGV = "ArticulatedHGV"
    EXTRA_LONG = "ExtraLong"
    # Aggregate marker for bypass traffic that is never disaggregated.
    ALL = "All"


_VEHICLE_TYPE_BY_CATEGORY = {
    VehicleCategory.UNDER_5_6: VehicleType.PASSENGER_VEHICLE,
    VehicleCategory.L5_6_TO_7_6: VehicleType.LIGHT_COMMERCIAL,
    VehicleCategory.L7_6_TO_12_5: VehicleType.BUS_MEDIUM_TRUCK,
    VehicleCategory.L12_5_TO_16_0: VehicleType.HEAVY_RIGID_SHORT_ARTICULATED,
    VehicleCategory.L16_0_TO_24_0: VehicleType.ARTICULATED_HGV,
    VehicleCategory.OVER_24_0: VehicleType.EXTRA_LONG,
}


def map_vehicle_type(category: VehicleCategory) -> VehicleType:
    """Map a length band to the vehicle type used in OD matrix entries."""
    return _VEHICLE_TYPE_BY_CATEGORY[category]


def category_of_length(length_m: float) -> VehicleCategory:
    """Return the length band containing ``length_m`` (metres).

    Boundaries belong to the upper band: 5.6 maps to the 5.6-7.6 band,
    24.0 to the open-ended top band.
    """
    if not length_m > 0:
        raise DataError(f"vehicle length must be positive, got {length_m!r}")
    for cat in CATEGORY_ORDER:
        if cat.upper_m is None or length_m < cat.upper_m:
            return cat
    raise AssertionError("unreachable: bands cover (0, inf)")


class NodeKind(Enum):
    MAIN_TOLLBOOTH = "main_tollbooth"
    COUNTY_TOLLBOOTH = "county_tollbooth"
    INFERRED_DESTINATION = "inferred_destination"


@dataclass(frozen=True)
class NodeId:
    """A named network node; names are unique within a network configuration."""

    name: str
    kind: NodeKind

    def __post_init__(self) -> None:
        if not self.name:
            raise DataError("node name cannot be empty")


class Direction(Enum):
    INBOUND = "Inbound"
    OUTBOUND = "Outbound"
    UNDIRECTED = "Undirected"

    @classmethod
    def parse(cls, raw: str) -> "Direction":
        for d in cls:
            if d.value == raw:
                return d
        allowed = ", ".join(d.value for d in cls)
        raise DataError(f"unknown direction {raw!r}; allowed: {allowed}")


@dataclass(frozen=True)
class HourKey:
    """A calendar hour with its derived temporal features.

    ``day_of_week`` uses 0 = Monday; weekends are Saturday and Sunday.
    """

    timestamp: datetime
    hour_of_day: int
    day_of_week: int
    is_weekend: bool

    def isoformat(self) -> str:
        return self.timestamp.strftime("%Y-%m-%dT%H:%M")


def make_hour_key(timestamp: datetime | str) -> HourKey:
    """Build an HourKey from a datetime or ISO string at hour resolution.

    Rejects timestamps carrying sub-hour components: the pipeline works on
    hourly aggregates and silently truncating would hide data problems.
    """
    if isinstance(timestamp, str):
        try:
            ts = datetime.fromisoformat(timestamp)
        except ValueError as exc:
            raise DataError(f"unparseable timestamp {timestamp!r}: {exc}") from exc
    elif isinstance(timestamp, datetime):
        ts = timestamp
    else:
        raise DataError(f"timestamp must be datetime or ISO string, got {timestamp!r}")
    if ts.minute or ts.second or ts.microsecond:
        raise DataError(f"timestamp {ts.isoformat()} is not at hour resolution")
    if ts.tzinfo is not None:
        raise DataError(f"timestamp {ts.isoformat()} must be naive local time")
    dow = ts.weekday()
    return HourKey(
        timestamp=ts,
        hour_of_day=ts.hour,
        day_of_week=dow,
        is_weekend=dow >= 5,
    )


# Reported totals may disagree with the category sum by at most this
# fraction before the record is flagged.
TOTAL_MISMATCH_TOLERANCE = 0.01


@dataclass(frozen=True)
class CountsByCategory:
    """Hourly vehicle counts per length band plus a total.

    The total may be reported independently of the categories (ground-truth
    feeds do this); ``total_mismatch`` marks records where it disagrees with
    the category sum by more than 1% of the total.
    """

    counts: dict[VehicleCategory, float]
    total: float
    total_mismatch: bool = field(default=False, compare=False)

    @classmethod
    def from_categories(cls, counts: dict[VehicleCategory, float]) -> "CountsByCategory":
        full = {cat: float(counts.get(cat, 0.0)) for cat in CATEGORY_ORDER}
        for cat, v in full.items():
            if v < 0:
                raise DataError(f"negative count {v!r} for category {cat.key}")
        return cls(counts=full, total=sum(full.values()))

    @classmethod
    def with_reported_total(
        cls, counts: dict[VehicleCategory, float], total: float
    ) -> "CountsByCategory":
        full = {cat: float(counts.get(cat, 0.0)) for cat in CATEGORY_ORDER}
        for cat, v in full.items():
            if v < 0:
                raise DataError(f"negative count {v!r} for category {cat.key}")
        if total < 0:
            raise DataError(f"negative total {total!r}")
        mismatch = abs(total - sum(full.values())) > TOTAL_MISMATCH_TOLERANCE * total
        return cls(counts=full, total=float(total), total_mismatch=mismatch)

    def category_sum(self) -> float:
        return sum(self.counts.values())

    def __add__(self, other: "CountsByCategory") -> "CountsByCategory":
        merged = {cat: self.counts[cat] + other.counts[cat] for cat in CATEGORY_ORDER}
        return CountsByCategory(
            counts=merged,
            total=self.total + other.total,
            total_mismatch=self.total_mismatch or other.total_mismatch,
        )


@dataclass(frozen=True)
class TollboothObservation:
    """One hourly ground-truth record at a tollbooth station."""

    node: NodeId
    direction: Direction
    hour: HourKey
    counts: CountsByCategory

    def join_key(self) -> str:
        """Node key used to match routing reports.

        Direction-qualified series are distinct nodes for joining purposes.
        """
        if self.direction is Direction.UNDIRECTED:
            return self.node.name
        return f"{self.node.name}|{self.direction.value}"


@dataclass(frozen=True)
class RoutingReportObservation:
    """One hourly aggregated mobility record at a network location.

    ``censored`` marks values suppressed below the privacy threshold;
    the reported flow is then zero.
    """

    node: NodeId
    hour: HourKey
    people_flow: float
    road_tag: RoadTag
    censored: bool = False

    def __post_init__(self) -> None:
        if self.people_flow < 0:
            raise DataError(f"people_flow must be non-negative, got {self.people_flow}")
        if self.censored and self.people_flow != 0:
            raise DataError("censored rows must carry people_flow = 0")
